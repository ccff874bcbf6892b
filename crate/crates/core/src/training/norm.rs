use crate::attention::EMBED_DIM;
use crate::attention::named;
use crate::error::{Error, Result};
use crate::params::Parameterized;
use crate::tensor::Tensor;

use super::pipeline::EmbeddedClip;

/// Per-dimension standardization of embedding sequences, fitted on the
/// stacks of a training split and frozen with the encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingNorm {
    pub image_mean: Tensor,
    pub image_scale: Tensor,
    pub seg_mean: Tensor,
    pub seg_scale: Tensor,
}

const NAMES: [&str; 4] = ["image_mean", "image_scale", "seg_mean", "seg_scale"];

fn moments<'a>(rows: impl Iterator<Item = &'a [f64]>) -> (Tensor, Tensor) {
    let mut sum = vec![0.0; EMBED_DIM];
    let mut sq = vec![0.0; EMBED_DIM];
    let mut n = 0usize;
    for r in rows {
        for ((s, q), &v) in sum.iter_mut().zip(&mut sq).zip(r) {
            *s += v;
            *q += v * v;
        }
        n += 1;
    }
    let n = n as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let scale: Vec<f64> = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let var = (q / n - m * m).max(0.0);
            if var > 1e-12 {
                1.0 / var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (
        Tensor::new(&[1, EMBED_DIM], mean).expect("norm shape"),
        Tensor::new(&[1, EMBED_DIM], scale).expect("norm shape"),
    )
}

fn standardize(t: &mut Tensor, mean: &Tensor, scale: &Tensor) {
    let (m, s) = (mean.data(), scale.data());
    for row in t.data_mut().chunks_exact_mut(EMBED_DIM) {
        for ((v, mu), k) in row.iter_mut().zip(m).zip(s) {
            *v = (*v - mu) * k;
        }
    }
}

impl EmbeddingNorm {
    pub fn identity() -> Self {
        let zeros = Tensor::zeros(&[1, EMBED_DIM]);
        let ones = Tensor::full(&[1, EMBED_DIM], 1.0);
        Self {
            image_mean: zeros.clone(),
            image_scale: ones.clone(),
            seg_mean: zeros,
            seg_scale: ones,
        }
    }

    /// Mean and inverse standard deviation of every dimension over all
    /// stacks of `data`. Constant dimensions keep a unit scale.
    pub fn fit(data: &[EmbeddedClip]) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::contract("cannot fit embedding statistics on no clips"));
        }
        let (image_mean, image_scale) = moments(data.iter().flat_map(|c| c.image.data().chunks_exact(EMBED_DIM)));
        let (seg_mean, seg_scale) = moments(data.iter().flat_map(|c| c.seg.data().chunks_exact(EMBED_DIM)));
        Ok(Self {
            image_mean,
            image_scale,
            seg_mean,
            seg_scale,
        })
    }

    pub fn apply(&self, clip: &mut EmbeddedClip) {
        standardize(&mut clip.image, &self.image_mean, &self.image_scale);
        standardize(&mut clip.seg, &self.seg_mean, &self.seg_scale);
    }

    pub fn from_named(tensors: &[(String, Tensor)], prefix: &str) -> Result<Self> {
        let get = |n: &str| named(tensors, &format!("{prefix}{n}"), [1, EMBED_DIM]);
        Ok(Self {
            image_mean: get(NAMES[0])?,
            image_scale: get(NAMES[1])?,
            seg_mean: get(NAMES[2])?,
            seg_scale: get(NAMES[3])?,
        })
    }
}

impl Parameterized for EmbeddingNorm {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.image_mean, &self.image_scale, &self.seg_mean, &self.seg_scale]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.image_mean, &mut self.image_scale, &mut self.seg_mean, &mut self.seg_scale]
    }

    fn param_names(&self) -> Vec<String> {
        NAMES.iter().map(|s| s.to_string()).collect()
    }
}
