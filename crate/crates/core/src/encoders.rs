//! Per-stack encoders producing 256-d embeddings.
//!
//! The built-in encoder is a 2-layer CNN: two 3×3 convolutions (stride 2,
//! padding 1, ReLU) with 16 and 32 filters, global average pooling, a 256-unit
//! ReLU embedding layer and a single-logit head. Convolutions are expressed as
//! a gather (im2col) followed by a matmul so their gradients come from the
//! tape.
//!
//! Weight layouts: `conv1.weight` is `27×16` with rows ordered
//! `(channel, ky, kx)`; `conv2.weight` is `144×32` with rows ordered
//! `(ky, kx, channel)`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;

use crate::attention::EMBED_DIM;
use crate::autodiff::{Graph, Var, GATHER_ZERO};
use crate::error::{Error, Result};
use crate::ingest::{ClipStacks, StackSource, STACK_DEPTH};
use crate::params::{glorot, zero_bias, Parameterized};
use crate::tensor::{load_sttf, Tensor};

pub const CONV1_FILTERS: usize = 16;
pub const CONV2_FILTERS: usize = 32;
const KERNEL: usize = 3;

/// Weights of one stack encoder. The segmentation encoder and the surrogate
/// image encoder share this architecture with separate parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    pub embed_w: Tensor,
    pub embed_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

pub type SegEncoderParams = EncoderParams;

const PARAM_NAMES: [&str; 8] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "embed.weight",
    "embed.bias",
    "head.weight",
    "head.bias",
];

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let k1 = STACK_DEPTH * KERNEL * KERNEL;
        let k2 = CONV1_FILTERS * KERNEL * KERNEL;
        Self {
            conv1_w: glorot(rng, k1, CONV1_FILTERS),
            conv1_b: zero_bias(CONV1_FILTERS),
            conv2_w: glorot(rng, k2, CONV2_FILTERS),
            conv2_b: zero_bias(CONV2_FILTERS),
            embed_w: glorot(rng, CONV2_FILTERS, EMBED_DIM),
            embed_b: zero_bias(EMBED_DIM),
            head_w: glorot(rng, EMBED_DIM, 1),
            head_b: zero_bias(1),
        }
    }

    fn shapes() -> [[usize; 2]; 8] {
        let k1 = STACK_DEPTH * KERNEL * KERNEL;
        let k2 = CONV1_FILTERS * KERNEL * KERNEL;
        [
            [k1, CONV1_FILTERS],
            [1, CONV1_FILTERS],
            [k2, CONV2_FILTERS],
            [1, CONV2_FILTERS],
            [CONV2_FILTERS, EMBED_DIM],
            [1, EMBED_DIM],
            [EMBED_DIM, 1],
            [1, 1],
        ]
    }

    pub fn from_named(tensors: &[(String, Tensor)], prefix: &str) -> Result<Self> {
        let get = |name: &str| -> Result<Tensor> {
            let full = format!("{prefix}{name}");
            tensors
                .iter()
                .find(|(n, _)| *n == full)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::contract(format!("missing tensor {full}")))
        };
        let p = Self {
            conv1_w: get(PARAM_NAMES[0])?,
            conv1_b: get(PARAM_NAMES[1])?,
            conv2_w: get(PARAM_NAMES[2])?,
            conv2_b: get(PARAM_NAMES[3])?,
            embed_w: get(PARAM_NAMES[4])?,
            embed_b: get(PARAM_NAMES[5])?,
            head_w: get(PARAM_NAMES[6])?,
            head_b: get(PARAM_NAMES[7])?,
        };
        for ((name, t), shape) in PARAM_NAMES.iter().zip(p.params()).zip(Self::shapes()) {
            if t.shape() != shape {
                return Err(Error::contract(format!(
                    "{prefix}{name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        Ok(p)
    }
}

impl Parameterized for EncoderParams {
    fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.embed_w,
            &self.embed_b,
            &self.head_w,
            &self.head_b,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.embed_w,
            &mut self.embed_b,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    fn param_names(&self) -> Vec<String> {
        PARAM_NAMES.iter().map(|s| s.to_string()).collect()
    }
}

/// Output extent of a 3×3, stride-2, padding-1 convolution.
fn conv_out(side: usize) -> usize {
    (side - 1) / 2 + 1
}

/// im2col index map for a stride-2, padding-1, 3×3 convolution.
///
/// `index(c, y, x)` gives the flat input offset of channel `c` at `(y, x)`;
/// `channel_major` selects the `(c, ky, kx)` column order instead of
/// `(ky, kx, c)`.
fn im2col_map(side: usize, channels: usize, channel_major: bool, index: impl Fn(usize, usize, usize) -> usize) -> Vec<u32> {
    let out = conv_out(side);
    let cols = channels * KERNEL * KERNEL;
    let mut map = Vec::with_capacity(out * out * cols);
    for oy in 0..out {
        for ox in 0..out {
            let mut push = |c: usize, ky: usize, kx: usize| {
                let iy = (2 * oy + ky) as isize - 1;
                let ix = (2 * ox + kx) as isize - 1;
                if iy < 0 || ix < 0 || iy >= side as isize || ix >= side as isize {
                    map.push(GATHER_ZERO);
                } else {
                    map.push(index(c, iy as usize, ix as usize) as u32);
                }
            };
            if channel_major {
                for c in 0..channels {
                    for ky in 0..KERNEL {
                        for kx in 0..KERNEL {
                            push(c, ky, kx);
                        }
                    }
                }
            } else {
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        for c in 0..channels {
                            push(c, ky, kx);
                        }
                    }
                }
            }
        }
    }
    map
}

/// Precomputed gather plans for a fixed input side.
#[derive(Debug, Clone)]
pub struct ConvEncoder {
    side: usize,
    map1: Arc<[u32]>,
    map2: Arc<[u32]>,
}

impl ConvEncoder {
    pub fn new(side: usize) -> Result<Self> {
        if side < 2 {
            return Err(Error::contract(format!("encoder input side must be at least 2, got {side}")));
        }
        let s1 = conv_out(side);
        let map1 = im2col_map(side, STACK_DEPTH, true, |c, y, x| c * side * side + y * side + x);
        let map2 = im2col_map(s1, CONV1_FILTERS, false, |c, y, x| (y * s1 + x) * CONV1_FILTERS + c);
        Ok(Self {
            side,
            map1: map1.into(),
            map2: map2.into(),
        })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Records the forward pass for one `3 × side × side` stack. Returns the
    /// `1×256` embedding (post-ReLU hidden layer) and the `1×1` logit.
    pub fn forward_graph(&self, g: &mut Graph<'_>, leaves: &[Var], stack: Var) -> Result<(Var, Var)> {
        let expect = [STACK_DEPTH, self.side, self.side];
        if g.value(stack).shape() != expect {
            return Err(Error::dim("seg_cnn_forward", g.value(stack).shape(), &expect));
        }
        let [c1w, c1b, c2w, c2b, ew, eb, hw, hb] = leaves else {
            return Err(Error::contract(format!("encoder expects 8 parameter leaves, got {}", leaves.len())));
        };
        let s1 = conv_out(self.side);
        let s2 = conv_out(s1);
        let cols1 = g.gather(stack, self.map1.clone(), &[s1 * s1, STACK_DEPTH * KERNEL * KERNEL])?;
        let z1 = g.matmul(cols1, *c1w)?;
        let z1 = g.add_row(z1, *c1b)?;
        let a1 = g.relu(z1);
        let cols2 = g.gather(a1, self.map2.clone(), &[s2 * s2, CONV1_FILTERS * KERNEL * KERNEL])?;
        let z2 = g.matmul(cols2, *c2w)?;
        let z2 = g.add_row(z2, *c2b)?;
        let a2 = g.relu(z2);
        let pooled = g.mean_axis(a2, 0)?;
        let e = g.matmul(pooled, *ew)?;
        let e = g.add_row(e, *eb)?;
        let emb = g.relu(e);
        let logit = g.matmul(emb, *hw)?;
        let logit = g.add_row(logit, *hb)?;
        Ok((emb, logit))
    }

    /// Value-level forward: `(embedding, logit)`.
    pub fn forward(&self, stack: &Tensor, params: &EncoderParams) -> Result<(Vec<f64>, f64)> {
        let mut g = Graph::new();
        let leaves = params.bind(&mut g, false);
        let x = g.param(stack, false);
        let (emb, logit) = self.forward_graph(&mut g, &leaves, x)?;
        Ok((g.value(emb).data().to_vec(), g.value(logit).data()[0]))
    }
}

/// Convenience wrapper matching the single-stack contract.
pub fn seg_cnn_forward(stack: &Tensor, params: &SegEncoderParams) -> Result<(Vec<f64>, f64)> {
    let side = stack.shape().get(1).copied().unwrap_or(0);
    if stack.rank() != 3 || stack.shape()[0] != STACK_DEPTH || stack.shape()[2] != side {
        return Err(Error::dim("seg_cnn_forward", stack.shape(), &[STACK_DEPTH, side, side]));
    }
    ConvEncoder::new(side)?.forward(stack, params)
}

/// Encodes a list of stacks into an `m×256` matrix, one row per stack, and
/// returns the per-stack logits alongside.
pub fn encode_stacks(encoder: &ConvEncoder, stacks: &[Tensor], params: &EncoderParams) -> Result<(Tensor, Vec<f64>)> {
    if stacks.is_empty() {
        return Err(Error::contract("cannot encode an empty stack list"));
    }
    let mut data = Vec::with_capacity(stacks.len() * EMBED_DIM);
    let mut logits = Vec::with_capacity(stacks.len());
    for s in stacks {
        let (e, l) = encoder.forward(s, params)?;
        data.extend(e);
        logits.push(l);
    }
    Ok((Tensor::new(&[stacks.len(), EMBED_DIM], data)?, logits))
}

/// Builds the segmentation matrix `S` of a clip from its mask stacks.
pub fn encode_clip_segmentation(
    encoder: &ConvEncoder,
    mask_stacks: &[Tensor],
    params: &SegEncoderParams,
) -> Result<Tensor> {
    Ok(encode_stacks(encoder, mask_stacks, params)?.0)
}

/// Where image-stack embeddings come from.
#[derive(Debug, Clone)]
pub enum ImageEmbeddingSource {
    /// `<dir>/<clip_id>.img.sttf`, each `m×256`.
    Precomputed(PathBuf),
    /// The built-in CNN applied to frame stacks.
    Surrogate(EncoderParams),
}

pub fn precomputed_path(dir: &Path, clip_id: &str) -> PathBuf {
    dir.join(format!("{clip_id}.img.sttf"))
}

/// Image embeddings for one clip, aligned with its `⌊n/3⌋` stacks. Stack
/// logits are only available from the surrogate encoder.
pub fn image_embeddings(
    source: &ImageEmbeddingSource,
    encoder: &ConvEncoder,
    clip: &ClipStacks<'_>,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    match source {
        ImageEmbeddingSource::Precomputed(dir) => {
            let t = load_sttf(&precomputed_path(dir, &clip.clip.clip_id))?;
            check_alignment(&clip.clip.clip_id, &t, clip.count)?;
            Ok((t, None))
        }
        ImageEmbeddingSource::Surrogate(params) => {
            let stacks: Vec<Tensor> = (0..clip.count).map(|k| clip.encoder_input(k, StackSource::Frames)).collect();
            let (t, logits) = encode_stacks(encoder, &stacks, params)?;
            Ok((t, Some(logits)))
        }
    }
}

pub fn check_alignment(clip_id: &str, t: &Tensor, expected_rows: usize) -> Result<()> {
    if t.rank() != 2 || t.cols() != EMBED_DIM {
        return Err(Error::Format {
            path: clip_id.to_string(),
            detail: format!("image embeddings must be m×{EMBED_DIM}, got {:?}", t.shape()),
        });
    }
    if t.rows() != expected_rows {
        return Err(Error::Alignment {
            clip_id: clip_id.to_string(),
            expected: expected_rows,
            found: t.rows(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_bias_params(rng: &mut ChaCha8Rng) -> EncoderParams {
        EncoderParams::init(rng)
    }

    #[test]
    fn zero_stack_gives_zero_embedding_and_head_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = zero_bias_params(&mut rng);
        p.head_b = Tensor::from_rows(&[[0.37]]).unwrap();
        let (emb, logit) = seg_cnn_forward(&Tensor::zeros(&[3, 64, 64]), &p).unwrap();
        assert_eq!(emb.len(), 256);
        assert!(emb.iter().all(|&v| v == 0.0));
        assert_eq!(logit, 0.37);
    }

    #[test]
    fn wrong_dims_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = EncoderParams::init(&mut rng);
        let enc = ConvEncoder::new(64).unwrap();
        assert!(matches!(enc.forward(&Tensor::zeros(&[3, 32, 32]), &p), Err(Error::Dimension { .. })));
        assert!(seg_cnn_forward(&Tensor::zeros(&[2, 64, 64]), &p).is_err());
    }

    #[test]
    fn encoding_is_deterministic_and_row_wise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = EncoderParams::init(&mut rng);
        let enc = ConvEncoder::new(16).unwrap();
        let mk = |rng: &mut ChaCha8Rng| {
            Tensor::new(&[3, 16, 16], (0..768).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let c = mk(&mut rng);
        let s1 = encode_clip_segmentation(&enc, &[a.clone(), b.clone(), c.clone()], &p).unwrap();
        assert_eq!(s1.shape(), &[3, 256]);
        let s2 = encode_clip_segmentation(&enc, &[c.clone(), a.clone(), b.clone()], &p).unwrap();
        assert_eq!(s1.row(0), s2.row(1));
        assert_eq!(s1.row(1), s2.row(2));
        assert_eq!(s1.row(2), s2.row(0));
        let same = encode_clip_segmentation(&enc, &[a.clone(), a.clone()], &p).unwrap();
        assert_eq!(same.row(0), same.row(1));
        assert!(encode_clip_segmentation(&enc, &[], &p).is_err());
    }
}
