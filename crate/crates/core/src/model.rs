//! Sequence decoders compared in the ablation: the full fusion model and three
//! reduced variants trained on the same embeddings.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_block_graph, check_sequences, named, stact_forward_graph, with_pe, AttentionParams, StactConfig, StactParams,
    EMBED_DIM,
};
use crate::autodiff::{sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::params::{glorot, zero_bias, Parameterized};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Self-attention over image embeddings only.
    ImageSelf,
    /// Self-attention over segmentation embeddings only.
    SegSelf,
    /// No attention: per-stack concatenation, mean pool, linear head.
    JointFusion,
    /// Self-attention plus image→segmentation cross-attention.
    Stact,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::ImageSelf, Variant::SegSelf, Variant::JointFusion, Variant::Stact];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ImageSelf => "image_self",
            Variant::SegSelf => "seg_self",
            Variant::JointFusion => "joint_fusion",
            Variant::Stact => "stact",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decoder {
    SingleBranch {
        variant: Variant,
        config: StactConfig,
        block: AttentionParams,
        head_w: Tensor,
        head_b: Tensor,
    },
    JointFusion {
        head_w: Tensor,
        head_b: Tensor,
    },
    Stact(StactParams),
}

impl Decoder {
    pub fn init<R: Rng + ?Sized>(variant: Variant, config: StactConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        Ok(match variant {
            Variant::ImageSelf | Variant::SegSelf => Decoder::SingleBranch {
                variant,
                config,
                block: AttentionParams::init(EMBED_DIM, config.heads, rng),
                head_w: glorot(rng, EMBED_DIM, 1),
                head_b: zero_bias(1),
            },
            Variant::JointFusion => Decoder::JointFusion {
                head_w: glorot(rng, 2 * EMBED_DIM, 1),
                head_b: zero_bias(1),
            },
            Variant::Stact => Decoder::Stact(StactParams::init(config, rng)),
        })
    }

    /// Rebuilds a decoder from tensors named as in
    /// [`Parameterized::param_names`], each prefixed by `prefix`.
    pub fn from_named(
        variant: Variant,
        config: StactConfig,
        tensors: &[(String, Tensor)],
        prefix: &str,
    ) -> Result<Self> {
        config.validate()?;
        let head = |width: usize| -> Result<(Tensor, Tensor)> {
            Ok((
                named(tensors, &format!("{prefix}head.weight"), [width, 1])?,
                named(tensors, &format!("{prefix}head.bias"), [1, 1])?,
            ))
        };
        Ok(match variant {
            Variant::ImageSelf | Variant::SegSelf => {
                let (head_w, head_b) = head(EMBED_DIM)?;
                Decoder::SingleBranch {
                    variant,
                    config,
                    block: AttentionParams::from_named(tensors, &format!("{prefix}self."), config.heads)?,
                    head_w,
                    head_b,
                }
            }
            Variant::JointFusion => {
                let (head_w, head_b) = head(2 * EMBED_DIM)?;
                Decoder::JointFusion { head_w, head_b }
            }
            Variant::Stact => Decoder::Stact(StactParams::from_named(tensors, prefix, config)?),
        })
    }

    pub fn config(&self) -> StactConfig {
        match self {
            Decoder::SingleBranch { config, .. } => *config,
            Decoder::JointFusion { .. } => StactConfig::default(),
            Decoder::Stact(p) => p.config,
        }
    }

    pub fn variant(&self) -> Variant {
        match self {
            Decoder::SingleBranch { variant, .. } => *variant,
            Decoder::JointFusion { .. } => Variant::JointFusion,
            Decoder::Stact(_) => Variant::Stact,
        }
    }

    /// Records the forward pass over aligned `m×256` sequences and returns the
    /// `1×1` logit.
    pub fn forward_graph(&self, g: &mut Graph<'_>, leaves: &[Var], i: Var, s: Var) -> Result<Var> {
        check_sequences(g, i, s)?;
        match self {
            Decoder::Stact(p) => stact_forward_graph(g, p, leaves, i, s),
            Decoder::SingleBranch {
                variant, config, block, ..
            } => {
                let x = if *variant == Variant::ImageSelf { i } else { s };
                let x = with_pe(g, x, config.pe_enabled)?;
                let att = attention_block_graph(g, x, x, &leaves[..8], block.heads, config)?;
                let pooled = g.mean_axis(att.output, 0)?;
                let logit = g.matmul(pooled, leaves[8])?;
                g.add_row(logit, leaves[9])
            }
            Decoder::JointFusion { .. } => {
                let fused = g.concat(&[i, s])?;
                let pooled = g.mean_axis(fused, 0)?;
                let logit = g.matmul(pooled, leaves[0])?;
                g.add_row(logit, leaves[1])
            }
        }
    }

    pub fn predict(&self, i: &Tensor, s: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let leaves = self.bind(&mut g, false);
        let iv = g.param(i, false);
        let sv = g.param(s, false);
        let logit = self.forward_graph(&mut g, &leaves, iv, sv)?;
        Ok(sigmoid(g.value(logit).data()[0]))
    }

    /// Per-stack probabilities, defined only for the joint-fusion head, which
    /// is linear in each stack's concatenated embedding.
    pub fn stack_probs(&self, i: &Tensor, s: &Tensor) -> Option<Vec<f64>> {
        let Decoder::JointFusion { head_w, head_b } = self else {
            return None;
        };
        let w = head_w.data();
        Some(
            (0..i.rows())
                .map(|k| {
                    let z: f64 = i.row(k).iter().chain(s.row(k)).zip(w).map(|(a, b)| a * b).sum::<f64>()
                        + head_b.data()[0];
                    sigmoid(z)
                })
                .collect(),
        )
    }
}

impl Parameterized for Decoder {
    fn params(&self) -> Vec<&Tensor> {
        match self {
            Decoder::SingleBranch {
                block, head_w, head_b, ..
            } => {
                let mut v = block.params();
                v.push(head_w);
                v.push(head_b);
                v
            }
            Decoder::JointFusion { head_w, head_b } => vec![head_w, head_b],
            Decoder::Stact(p) => p.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Decoder::SingleBranch {
                block, head_w, head_b, ..
            } => {
                let mut v = block.params_mut();
                v.push(head_w);
                v.push(head_b);
                v
            }
            Decoder::JointFusion { head_w, head_b } => vec![head_w, head_b],
            Decoder::Stact(p) => p.params_mut(),
        }
    }

    fn param_names(&self) -> Vec<String> {
        match self {
            Decoder::SingleBranch { block, .. } => {
                let mut v: Vec<String> = block.param_names().into_iter().map(|n| format!("self.{n}")).collect();
                v.push("head.weight".into());
                v.push("head.bias".into());
                v
            }
            Decoder::JointFusion { .. } => vec!["head.weight".into(), "head.bias".into()],
            Decoder::Stact(p) => p.param_names(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("vit".parse::<Variant>().is_err());
    }

    #[test]
    fn single_branch_ignores_other_modality() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = Decoder::init(Variant::ImageSelf, StactConfig::default(), &mut rng).unwrap();
        let mk = |rng: &mut ChaCha8Rng| {
            Tensor::new(&[4, EMBED_DIM], (0..4 * EMBED_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let i = mk(&mut rng);
        let (s1, s2) = (mk(&mut rng), mk(&mut rng));
        assert_eq!(d.predict(&i, &s1).unwrap(), d.predict(&i, &s2).unwrap());
    }

    #[test]
    fn joint_fusion_is_mean_of_linear_stack_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Decoder::init(Variant::JointFusion, StactConfig::default(), &mut rng).unwrap();
        let mk = |rng: &mut ChaCha8Rng| {
            Tensor::new(&[3, EMBED_DIM], (0..3 * EMBED_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let (i, s) = (mk(&mut rng), mk(&mut rng));
        let probs = d.stack_probs(&i, &s).unwrap();
        let logits: Vec<f64> = probs.iter().map(|p| (p / (1.0 - p)).ln()).collect();
        let mean_logit = logits.iter().sum::<f64>() / 3.0;
        assert!((d.predict(&i, &s).unwrap() - sigmoid(mean_logit)).abs() < 1e-12);
    }

    #[test]
    fn from_named_round_trips_every_variant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in Variant::ALL {
            let d = Decoder::init(v, StactConfig::default(), &mut rng).unwrap();
            let named: Vec<(String, Tensor)> = d
                .param_names()
                .into_iter()
                .map(|n| format!("dec.{n}"))
                .zip(d.params().into_iter().cloned())
                .collect();
            assert_eq!(Decoder::from_named(v, d.config(), &named, "dec.").unwrap(), d);
        }
    }
}
