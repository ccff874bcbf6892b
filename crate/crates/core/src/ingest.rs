//! Cine clips, ROI cropping, 3-stack windowing and the JSON-lines manifest.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{decode_sttf, Tensor, STTF_MAGIC, STTF_VERSION};

/// Frames per stack instance.
pub const STACK_DEPTH: usize = 3;
pub const DEFAULT_BUFFER_PX: usize = 5;
pub const DEFAULT_SIDE: usize = 64;

/// Axis-aligned box in pixel coordinates, half-open: columns
/// `x_min..x_max`, rows `y_min..y_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl RoiBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn width(&self) -> usize {
        self.x_max.saturating_sub(self.x_min)
    }

    pub fn height(&self) -> usize {
        self.y_max.saturating_sub(self.y_min)
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::InvalidRoi(format!("degenerate box {self:?}")));
        }
        if self.x_max > width || self.y_max > height {
            return Err(Error::InvalidRoi(format!("box {self:?} exceeds image {height}×{width}")));
        }
        Ok(())
    }

    pub fn to_array(self) -> [usize; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// Expands `roi` by `buffer_px` on every side and clamps it to the image.
pub fn buffer_crop(roi: RoiBox, buffer_px: usize, dims: (usize, usize)) -> Result<RoiBox> {
    let (h, w) = dims;
    roi.validate(h, w)?;
    Ok(RoiBox {
        x_min: roi.x_min.saturating_sub(buffer_px),
        y_min: roi.y_min.saturating_sub(buffer_px),
        x_max: (roi.x_max + buffer_px).min(w),
        y_max: (roi.y_max + buffer_px).min(h),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Benign = 0,
    Malignant = 1,
}

impl Label {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Benign),
            1 => Some(Label::Malignant),
            _ => None,
        }
    }

    pub fn as_f64(self) -> f64 {
        self as u8 as f64
    }

    pub fn is_positive(self) -> bool {
        self == Label::Malignant
    }
}

/// One cine clip held in memory. Frames are grayscale in `[0, 1]`; masks are
/// binary. Both are `n × height × width`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CineClip {
    pub clip_id: String,
    pub height: usize,
    pub width: usize,
    pub frames: Vec<f32>,
    pub masks: Vec<u8>,
    pub label: Label,
    pub roi: RoiBox,
}

impl CineClip {
    pub fn num_frames(&self) -> usize {
        self.frames.len() / (self.height * self.width).max(1)
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let px = self.height * self.width;
        &self.frames[t * px..(t + 1) * px]
    }

    pub fn mask(&self, t: usize) -> &[u8] {
        let px = self.height * self.width;
        &self.masks[t * px..(t + 1) * px]
    }

    pub fn validate(&self) -> Result<()> {
        let ingest = |detail: String| Error::Ingest {
            clip_id: self.clip_id.clone(),
            detail,
        };
        let px = self.height * self.width;
        if px == 0 || !self.frames.len().is_multiple_of(px) {
            return Err(ingest(format!("frame buffer of {} values is not n×{}×{}", self.frames.len(), self.height, self.width)));
        }
        if self.masks.len() != self.frames.len() {
            return Err(ingest(format!("{} mask values for {} frame values", self.masks.len(), self.frames.len())));
        }
        if self.masks.iter().any(|&m| m > 1) {
            return Err(ingest("mask values must be 0 or 1".into()));
        }
        if self.frames.iter().any(|v| !v.is_finite()) {
            return Err(ingest("non-finite frame value".into()));
        }
        self.roi
            .validate(self.height, self.width)
            .map_err(|e| ingest(e.to_string()))
    }
}

/// Why a clip produced no stacks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipReason {
    pub clip_id: String,
    pub num_frames: usize,
    pub reason: String,
}

/// Non-overlapping windows of [`STACK_DEPTH`] items over `n` items; a trailing
/// remainder of one or two items is dropped.
pub fn stack_windows(n: usize) -> Vec<Range<usize>> {
    (0..n / STACK_DEPTH).map(|k| k * STACK_DEPTH..(k + 1) * STACK_DEPTH).collect()
}

/// Groups `items` into consecutive triples. Fewer than three items yields a
/// skip reason instead.
pub fn make_stacks<T: Clone>(clip_id: &str, items: &[T]) -> std::result::Result<Vec<[T; 3]>, SkipReason> {
    if items.len() < STACK_DEPTH {
        return Err(SkipReason {
            clip_id: clip_id.to_string(),
            num_frames: items.len(),
            reason: format!("{} frame(s) is fewer than one {STACK_DEPTH}-frame stack", items.len()),
        });
    }
    Ok(stack_windows(items.len())
        .into_iter()
        .map(|r| [items[r.start].clone(), items[r.start + 1].clone(), items[r.start + 2].clone()])
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropConfig {
    pub buffer_px: usize,
    pub side: usize,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self {
            buffer_px: DEFAULT_BUFFER_PX,
            side: DEFAULT_SIDE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StackSource {
    Frames,
    Masks,
}

/// One encoder input: three consecutive frames (or masks) cropped and resized
/// to `side × side`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackInstance {
    pub clip_id: String,
    pub stack_index: usize,
    pub channels: Tensor,
    pub label: Label,
}

/// A clip with its crop box resolved, ready to materialize stacks on demand.
#[derive(Debug, Clone, Copy)]
pub struct ClipStacks<'a> {
    pub clip: &'a CineClip,
    pub crop: RoiBox,
    pub side: usize,
    pub count: usize,
}

impl<'a> ClipStacks<'a> {
    /// Fails for invalid clips; a clip with fewer than three frames is
    /// reported through `Ok(Err(reason))`.
    pub fn new(clip: &'a CineClip, cfg: &CropConfig) -> Result<std::result::Result<Self, SkipReason>> {
        clip.validate()?;
        let n = clip.num_frames();
        if n < STACK_DEPTH {
            return Ok(Err(make_stacks(&clip.clip_id, &vec![(); n]).unwrap_err()));
        }
        let crop = buffer_crop(clip.roi, cfg.buffer_px, (clip.height, clip.width)).map_err(|e| Error::Ingest {
            clip_id: clip.clip_id.clone(),
            detail: e.to_string(),
        })?;
        Ok(Ok(Self {
            clip,
            crop,
            side: cfg.side,
            count: n / STACK_DEPTH,
        }))
    }

    /// Stack `k` as a `3 × side × side` tensor.
    pub fn stack(&self, k: usize, source: StackSource) -> Tensor {
        assert!(k < self.count, "stack {k} out of range ({})", self.count);
        let s = self.side;
        let mut data = Vec::with_capacity(STACK_DEPTH * s * s);
        for t in k * STACK_DEPTH..(k + 1) * STACK_DEPTH {
            match source {
                StackSource::Frames => resize_bilinear(self.clip.frame(t), self.clip.width, self.crop, s, &mut data),
                StackSource::Masks => resize_nearest(self.clip.mask(t), self.clip.width, self.crop, s, &mut data),
            }
        }
        Tensor::new(&[STACK_DEPTH, s, s], data).expect("stack shape")
    }

    /// Stack `k` as fed to an encoder: frame stacks are standardized to zero
    /// mean and unit variance, mask stacks stay binary.
    pub fn encoder_input(&self, k: usize, source: StackSource) -> Tensor {
        let mut t = self.stack(k, source);
        if source == StackSource::Frames {
            standardize(t.data_mut());
        }
        t
    }

    pub fn instance(&self, k: usize, source: StackSource) -> StackInstance {
        StackInstance {
            clip_id: self.clip.clip_id.clone(),
            stack_index: k,
            channels: self.stack(k, source),
            label: self.clip.label,
        }
    }
}

/// In-place z-scoring; a constant input is only centered.
pub fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let scale = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
    v.iter_mut().for_each(|x| *x = (*x - mean) * scale);
}

/// Bilinear resampling of the `crop` region of a row-major image with
/// half-pixel centers; appends `side²` values to `out`.
fn resize_bilinear(img: &[f32], width: usize, crop: RoiBox, side: usize, out: &mut Vec<f64>) {
    let (cw, ch) = (crop.width(), crop.height());
    let sx = cw as f64 / side as f64;
    let sy = ch as f64 / side as f64;
    let px = |x: usize, y: usize| img[(crop.y_min + y) * width + crop.x_min + x] as f64;
    for oy in 0..side {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(ch - 1);
        let wy = fy - y0 as f64;
        for ox in 0..side {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(cw - 1);
            let wx = fx - x0 as f64;
            let top = px(x0, y0) * (1.0 - wx) + px(x1, y0) * wx;
            let bottom = px(x0, y1) * (1.0 - wx) + px(x1, y1) * wx;
            out.push(top * (1.0 - wy) + bottom * wy);
        }
    }
}

fn resize_nearest(img: &[u8], width: usize, crop: RoiBox, side: usize, out: &mut Vec<f64>) {
    let (cw, ch) = (crop.width(), crop.height());
    for oy in 0..side {
        let y = (((oy as f64 + 0.5) * ch as f64 / side as f64) as usize).min(ch - 1);
        for ox in 0..side {
            let x = (((ox as f64 + 0.5) * cw as f64 / side as f64) as usize).min(cw - 1);
            out.push(img[(crop.y_min + y) * width + crop.x_min + x] as f64);
        }
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub clip_id: String,
    pub frames: PathBuf,
    pub masks: PathBuf,
    pub label: u8,
    pub roi: [usize; 4],
}

/// A validated manifest entry with paths resolved against the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipRef {
    pub clip_id: String,
    pub frames: PathBuf,
    pub masks: PathBuf,
    pub label: Label,
    pub roi: RoiBox,
    /// `(n, height, width)` as declared by the frame file header.
    pub dims: (usize, usize, usize),
}

/// Reads only the header of an STTF file.
pub fn read_sttf_shape(path: &Path) -> Result<Vec<usize>> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut head = [0u8; 8];
    f.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
    let fmt = |detail: String| Error::Format {
        path: path.display().to_string(),
        detail,
    };
    if &head[..4] != STTF_MAGIC {
        return Err(fmt("bad magic".into()));
    }
    if u16::from_le_bytes([head[4], head[5]]) != STTF_VERSION {
        return Err(fmt("unsupported version".into()));
    }
    let rank = u16::from_le_bytes([head[6], head[7]]) as usize;
    let mut ext = vec![0u8; rank * 8];
    f.read_exact(&mut ext).map_err(|e| Error::io(path, e))?;
    Ok(ext.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize).collect())
}

/// Parses and validates a JSON-lines manifest. Blank lines are ignored.
pub fn load_manifest(path: &Path) -> Result<Vec<ClipRef>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: format!("{}:{}", path.display(), lineno + 1),
            detail: e.to_string(),
        })?;
        let ingest = |detail: String| Error::Ingest {
            clip_id: rec.clip_id.clone(),
            detail,
        };
        if !seen.insert(rec.clip_id.clone()) {
            return Err(ingest("duplicate clip_id".into()));
        }
        let label = Label::from_u8(rec.label).ok_or_else(|| ingest(format!("label {} is not 0 or 1", rec.label)))?;
        let frames = base.join(&rec.frames);
        let masks = base.join(&rec.masks);
        for p in [&frames, &masks] {
            if !p.is_file() {
                return Err(ingest(format!("missing file {}", p.display())));
            }
        }
        let fshape = read_sttf_shape(&frames).map_err(|e| ingest(e.to_string()))?;
        let mshape = read_sttf_shape(&masks).map_err(|e| ingest(e.to_string()))?;
        if fshape.len() != 3 {
            return Err(ingest(format!("frames {} must be rank-3 n×H×W, got {fshape:?}", frames.display())));
        }
        if mshape != fshape {
            return Err(ingest(format!("mask shape {mshape:?} does not match frame shape {fshape:?}")));
        }
        let roi = RoiBox::new(rec.roi[0], rec.roi[1], rec.roi[2], rec.roi[3]);
        roi.validate(fshape[1], fshape[2]).map_err(|e| ingest(e.to_string()))?;
        out.push(ClipRef {
            clip_id: rec.clip_id,
            frames,
            masks,
            label,
            roi,
            dims: (fshape[0], fshape[1], fshape[2]),
        });
    }
    Ok(out)
}

/// Loads the pixel data of a manifest entry.
pub fn load_clip(r: &ClipRef) -> Result<CineClip> {
    let read = |p: &Path| -> Result<Tensor> {
        let buf = fs::read(p).map_err(|e| Error::io(p, e))?;
        Ok(decode_sttf(&buf, &p.display().to_string())?.0)
    };
    let frames = read(&r.frames)?;
    let masks = read(&r.masks)?;
    let (_, h, w) = r.dims;
    let mask_bytes = masks
        .data()
        .iter()
        .map(|&v| match v {
            v if v == 0.0 => Ok(0u8),
            v if v == 1.0 => Ok(1u8),
            v => Err(Error::Ingest {
                clip_id: r.clip_id.clone(),
                detail: format!("mask value {v} is not binary"),
            }),
        })
        .collect::<Result<Vec<u8>>>()?;
    let clip = CineClip {
        clip_id: r.clip_id.clone(),
        height: h,
        width: w,
        frames: frames.data().iter().map(|&v| v as f32).collect(),
        masks: mask_bytes,
        label: r.label,
        roi: r.roi,
    };
    clip.validate()?;
    Ok(clip)
}

pub fn load_dataset(manifest: &Path) -> Result<Vec<CineClip>> {
    load_manifest(manifest)?.iter().map(load_clip).collect()
}
