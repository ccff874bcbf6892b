//! Synthetic cine clips with a planted, two-channel malignancy signal.
//!
//! Every clip shows one elliptical nodule drifting over a smooth noise
//! background. A malignant clip carries its label through one or both of two
//! independently drawn channels:
//!
//! * shape: the ellipse axes jump between random extremes from frame to frame
//!   instead of following a slow sinusoid, with the mix set by `shape_snr`;
//! * texture: extra speckle inside the nodule, scaled by `texture_snr`.
//!
//! The shape channel is active with probability `complementarity` and the
//! texture channel with probability `1 - complementarity`. Benign clips have
//! neither, and no intensity contrast at all inside the nodule, so their
//! frames say nothing about the mask.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::ingest::{CineClip, Label, ManifestRecord, RoiBox};
use crate::rng::{stream, TAG_GENERATOR, TAG_LABELS};
use crate::tensor::encode_sttf_f32;

/// Relative amplitude of axis modulation.
pub const AXIS_AMPLITUDE: f64 = 0.35;
pub const MIN_AXIS_PX: f64 = 4.0;
/// Speckle standard deviation inside texture-active nodules at unit SNR.
pub const TEXTURE_STD: f64 = 0.12;
pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_clips: usize,
    pub malignant_fraction: f64,
    pub min_frames: usize,
    pub max_frames: usize,
    pub image_side: usize,
    pub texture_snr: f64,
    pub shape_snr: f64,
    pub complementarity: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_clips: 120,
            malignant_fraction: 0.0885,
            min_frames: 30,
            max_frames: 150,
            image_side: 64,
            texture_snr: 1.0,
            shape_snr: 1.0,
            complementarity: 0.5,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.malignant_fraction > 0.0 && self.malignant_fraction < 1.0) {
            return bad(format!("malignant_fraction must lie in (0,1), got {}", self.malignant_fraction));
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return bad(format!("invalid frame range [{}, {}]", self.min_frames, self.max_frames));
        }
        if self.image_side < 24 {
            return bad(format!("image_side must be at least 24, got {}", self.image_side));
        }
        if !(self.texture_snr >= 0.0) || !(self.shape_snr >= 0.0) {
            return bad("signal-to-noise ratios must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.complementarity) {
            return bad(format!("complementarity must lie in [0,1], got {}", self.complementarity));
        }
        Ok(())
    }

    pub fn n_malignant(&self) -> usize {
        (self.n_clips as f64 * self.malignant_fraction).round() as usize
    }
}

/// Which signal channels a clip carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channels {
    pub shape: bool,
    pub texture: bool,
}

fn box_blur_rows(src: &[f64], dst: &mut [f64], w: usize, h: usize, r: usize) {
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            dst[y * w + x] = row[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
        }
    }
}

fn box_blur_cols(src: &[f64], dst: &mut [f64], w: usize, h: usize, r: usize) {
    for x in 0..w {
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            dst[y * w + x] = (lo..=hi).map(|yy| src[yy * w + x]).sum::<f64>() / (hi - lo + 1) as f64;
        }
    }
}

/// Smooth background noise with roughly unit standard deviation.
fn smooth_noise<R: Rng>(rng: &mut R, side: usize) -> Vec<f64> {
    const RADIUS: usize = 2;
    let n = side * side;
    let white: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
    let mut tmp = vec![0.0; n];
    let mut out = vec![0.0; n];
    box_blur_rows(&white, &mut tmp, side, side, RADIUS);
    box_blur_cols(&tmp, &mut out, side, side, RADIUS);
    let gain = (2 * RADIUS + 1) as f64;
    out.iter_mut().for_each(|v| *v *= gain);
    out
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.theta.sin_cos();
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }

    fn rasterize(&self, side: usize, out: &mut [u8]) {
        for y in 0..side {
            for x in 0..side {
                out[y * side + x] = self.contains(x as f64 + 0.5, y as f64 + 0.5) as u8;
            }
        }
    }
}

/// Keeps only the 4-connected component containing `seed`, returning its
/// area.
fn keep_component(mask: &mut [u8], side: usize, seed: (usize, usize)) -> usize {
    let mut keep = vec![0u8; mask.len()];
    let start = seed.1 * side + seed.0;
    if mask[start] == 0 {
        mask.fill(0);
        return 0;
    }
    let mut stack = vec![start];
    keep[start] = 1;
    let mut area = 0;
    while let Some(p) = stack.pop() {
        area += 1;
        let (x, y) = (p % side, p / side);
        let mut visit = |q: usize| {
            if mask[q] == 1 && keep[q] == 0 {
                keep[q] = 1;
                stack.push(q);
            }
        };
        if x > 0 {
            visit(p - 1);
        }
        if x + 1 < side {
            visit(p + 1);
        }
        if y > 0 {
            visit(p - side);
        }
        if y + 1 < side {
            visit(p + side);
        }
    }
    mask.copy_from_slice(&keep);
    area
}

/// Generates one clip. All randomness comes from `rng`, and the number of
/// draws does not depend on the label.
pub fn generate_clip<R: Rng>(clip_id: &str, label: Label, cfg: &GenConfig, rng: &mut R) -> Result<(CineClip, Channels)> {
    cfg.validate()?;
    let side = cfg.image_side;
    let sf = side as f64;
    let n = rng.random_range(cfg.min_frames..=cfg.max_frames);
    let malignant = label == Label::Malignant;
    let shape_draw = rng.random_bool(cfg.complementarity);
    let texture_draw = rng.random_bool(1.0 - cfg.complementarity);
    let channels = Channels {
        shape: malignant && shape_draw && cfg.shape_snr > 0.0,
        texture: malignant && texture_draw && cfg.texture_snr > 0.0,
    };
    let beta = if channels.shape { cfg.shape_snr / (1.0 + cfg.shape_snr) } else { 0.0 };
    let speckle = if channels.texture { TEXTURE_STD * cfg.texture_snr } else { 0.0 };

    let a0 = rng.random_range(0.15 * sf..0.25 * sf);
    let b0 = rng.random_range(0.15 * sf..0.25 * sf);
    let reach = a0.max(b0) * (1.0 + AXIS_AMPLITUDE) + 1.0;
    let (lo, hi) = (reach, sf - reach);
    let mut cx = rng.random_range(0.45 * sf..0.55 * sf);
    let mut cy = rng.random_range(0.45 * sf..0.55 * sf);
    let (mut vx, mut vy) = (0.0f64, 0.0f64);
    let mut theta = rng.random_range(0.0..PI);
    let period = rng.random_range(24.0..30.0);
    let phase_a = rng.random_range(0.0..2.0 * PI);
    let phase_b = rng.random_range(0.0..2.0 * PI);
    let step = Normal::new(0.0, 0.15).expect("valid normal");
    let turn = Normal::new(0.0, 0.02).expect("valid normal");

    let mut frames = Vec::with_capacity(n * side * side);
    let mut masks = vec![0u8; n * side * side];
    let (mut x_min, mut y_min, mut x_max, mut y_max) = (side, side, 0, 0);
    for t in 0..n {
        vx = 0.85 * vx + step.sample(rng);
        vy = 0.85 * vy + step.sample(rng);
        cx += vx;
        cy += vy;
        if cx < lo || cx > hi {
            cx = cx.clamp(lo, hi);
            vx = -vx;
        }
        if cy < lo || cy > hi {
            cy = cy.clamp(lo, hi);
            vy = -vy;
        }
        theta += turn.sample(rng);
        let w = 2.0 * PI * t as f64 / period;
        let fast_a: f64 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let fast_b: f64 = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let ua = (1.0 - beta) * (w + phase_a).sin() + beta * fast_a;
        let ub = (1.0 - beta) * (w + phase_b).sin() + beta * fast_b;
        let e = Ellipse {
            cx,
            cy,
            a: (a0 * (1.0 + AXIS_AMPLITUDE * ua)).max(MIN_AXIS_PX),
            b: (b0 * (1.0 + AXIS_AMPLITUDE * ub)).max(MIN_AXIS_PX),
            theta,
        };
        let mask = &mut masks[t * side * side..(t + 1) * side * side];
        e.rasterize(side, mask);
        let area = keep_component(mask, side, (cx as usize, cy as usize));
        if area < 25 {
            return Err(Error::contract(format!("clip {clip_id} frame {t}: nodule area {area} below 25 pixels")));
        }

        let bg = smooth_noise(rng, side);
        for p in 0..side * side {
            let white: f64 = rng.sample(rand_distr::StandardNormal);
            let extra: f64 = rng.sample(rand_distr::StandardNormal);
            let mut v = 0.5 + 0.1 * bg[p] + 0.02 * white;
            if mask[p] == 1 {
                v += speckle * extra;
                let (x, y) = (p % side, p / side);
                x_min = x_min.min(x);
                y_min = y_min.min(y);
                x_max = x_max.max(x + 1);
                y_max = y_max.max(y + 1);
            }
            frames.push(v as f32);
        }
    }

    let clip = CineClip {
        clip_id: clip_id.to_string(),
        height: side,
        width: side,
        frames,
        masks,
        label,
        roi: RoiBox::new(x_min, y_min, x_max, y_max),
    };
    clip.validate()?;
    Ok((clip, channels))
}

pub fn clip_id(index: usize) -> String {
    format!("clip{index:04}")
}

/// Exactly `round(n · malignant_fraction)` positives placed by a seeded
/// permutation.
pub fn assign_labels(cfg: &GenConfig) -> Vec<Label> {
    let pos = cfg.n_malignant();
    let mut labels: Vec<Label> = (0..cfg.n_clips)
        .map(|i| if i < pos { Label::Malignant } else { Label::Benign })
        .collect();
    labels.shuffle(&mut stream(cfg.seed, &[TAG_LABELS]));
    labels
}

/// Generates the whole dataset in memory. Clip `i` draws from its own
/// stream, so the result does not depend on `exec`.
pub fn generate_clips(cfg: &GenConfig, exec: Exec) -> Result<Vec<(CineClip, Channels)>> {
    cfg.validate()?;
    let labels = assign_labels(cfg);
    if cfg.n_clips > 0 && cfg.n_malignant() < 5 {
        warn!("only {} malignant clips; 5-fold stratification will leave folds without positives", cfg.n_malignant());
    }
    exec.map_range(cfg.n_clips, |i| {
        let mut rng = stream(cfg.seed, &[TAG_GENERATOR, i as u64]);
        generate_clip(&clip_id(i), labels[i], cfg, &mut rng)
    })
    .into_iter()
    .collect()
}

/// Summary of a dataset written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub manifest: PathBuf,
    pub n_clips: usize,
    pub n_malignant: usize,
    pub total_frames: usize,
}

/// Writes `manifest.jsonl` and `clips/<id>.frames.sttf` / `.masks.sttf`
/// under `out`.
pub fn generate_dataset(cfg: &GenConfig, out: &Path, exec: Exec) -> Result<DatasetSummary> {
    let clips = generate_clips(cfg, exec)?;
    let clip_dir = out.join("clips");
    let dir = if clips.is_empty() { out } else { &clip_dir };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    let mut total_frames = 0;
    for (clip, _) in &clips {
        let n = clip.num_frames();
        total_frames += n;
        let shape = [n, clip.height, clip.width];
        let frames_rel = PathBuf::from("clips").join(format!("{}.frames.sttf", clip.clip_id));
        let masks_rel = PathBuf::from("clips").join(format!("{}.masks.sttf", clip.clip_id));
        let masks: Vec<f32> = clip.masks.iter().map(|&m| m as f32).collect();
        for (rel, bytes) in [
            (&frames_rel, encode_sttf_f32(&shape, &clip.frames)),
            (&masks_rel, encode_sttf_f32(&shape, &masks)),
        ] {
            let p = out.join(rel);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        }
        let rec = ManifestRecord {
            clip_id: clip.clip_id.clone(),
            frames: frames_rel,
            masks: masks_rel,
            label: clip.label as u8,
            roi: clip.roi.to_array(),
        };
        manifest.push_str(&serde_json::to_string(&rec).expect("manifest record serializes"));
        manifest.push('\n');
    }
    let path = out.join(MANIFEST_NAME);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(DatasetSummary {
        manifest: path,
        n_clips: clips.len(),
        n_malignant: clips.iter().filter(|(c, _)| c.label == Label::Malignant).count(),
        total_frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> GenConfig {
        GenConfig {
            n_clips: 12,
            malignant_fraction: 0.5,
            min_frames: 6,
            max_frames: 12,
            image_side: 32,
            ..GenConfig::default()
        }
    }

    #[test]
    fn default_counts() {
        let cfg = GenConfig::default();
        assert_eq!(cfg.n_malignant(), 11);
        let labels = assign_labels(&cfg);
        assert_eq!(labels.iter().filter(|l| l.is_positive()).count(), 11);
    }

    #[test]
    fn clip_is_deterministic_and_well_formed() {
        let cfg = small();
        let gen = |seed| generate_clip("c", Label::Malignant, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let (a, _) = gen(4);
        let (b, _) = gen(4);
        assert_eq!(a, b);
        let side = cfg.image_side;
        for t in 0..a.num_frames() {
            let mut m = a.mask(t).to_vec();
            let area = m.iter().filter(|&&v| v == 1).count();
            assert!(area >= 25);
            let (sx, sy) = (0..m.len()).find(|&p| m[p] == 1).map(|p| (p % side, p / side)).unwrap();
            assert_eq!(keep_component(&mut m, side, (sx, sy)), area, "mask not one component");
        }
        let roi = a.roi;
        for t in 0..a.num_frames() {
            for (p, &v) in a.mask(t).iter().enumerate() {
                if v == 1 {
                    let (x, y) = (p % side, p / side);
                    assert!(x >= roi.x_min && x < roi.x_max && y >= roi.y_min && y < roi.y_max);
                }
            }
        }
    }

    #[test]
    fn channels_follow_complementarity() {
        let mut cfg = small();
        cfg.complementarity = 1.0;
        for seed in 0..20 {
            let (_, ch) = generate_clip("c", Label::Malignant, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!(ch.shape && !ch.texture);
            let (_, ch) = generate_clip("c", Label::Benign, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!(!ch.shape && !ch.texture);
        }
    }

    #[test]
    fn without_signal_labels_do_not_change_pixels() {
        let mut cfg = small();
        cfg.texture_snr = 0.0;
        cfg.shape_snr = 0.0;
        let (a, _) = generate_clip("c", Label::Malignant, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (b, _) = generate_clip("c", Label::Benign, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!((a.frames, a.masks, a.roi), (b.frames, b.masks, b.roi));
    }

    #[test]
    fn serial_and_parallel_agree() {
        let cfg = small();
        assert_eq!(generate_clips(&cfg, Exec::Serial).unwrap(), generate_clips(&cfg, Exec::Parallel).unwrap());
    }

    #[test]
    fn empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GenConfig {
            n_clips: 0,
            ..GenConfig::default()
        };
        let s = generate_dataset(&cfg, dir.path(), Exec::Serial).unwrap();
        assert_eq!(s.n_clips, 0);
        assert_eq!(fs::read_to_string(s.manifest).unwrap(), "");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn invalid_config() {
        for cfg in [
            GenConfig { malignant_fraction: 0.0, ..GenConfig::default() },
            GenConfig { complementarity: 1.5, ..GenConfig::default() },
            GenConfig { min_frames: 40, max_frames: 30, ..GenConfig::default() },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
