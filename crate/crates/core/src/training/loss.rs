use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, Var};
use crate::error::{Error, Result};

/// Probability clamp applied to `p_t` before the log.
pub const PT_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalLossConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalLossConfig {
    fn default() -> Self {
        Self { alpha: 0.9, gamma: 2.4 }
    }
}

impl FocalLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) || !(self.gamma >= 0.0) {
            return Err(Error::Config(format!(
                "focal loss needs alpha in (0,1) and gamma ≥ 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Binary focal loss of a single logit:
/// `-α_t (1 - p_t)^γ log p_t` with `p_t` clamped to `[1e-7, 1 - 1e-7]`.
pub fn focal_loss(logit: f64, y: f64, cfg: &FocalLossConfig) -> f64 {
    let p = sigmoid(logit);
    let pt = (y * p + (1.0 - y) * (1.0 - p)).clamp(PT_CLAMP, 1.0 - PT_CLAMP);
    let alpha_t = y * cfg.alpha + (1.0 - y) * (1.0 - cfg.alpha);
    -alpha_t * (1.0 - pt).powf(cfg.gamma) * pt.ln()
}

/// Records [`focal_loss`] on the tape for a `1×1` logit node.
pub fn focal_loss_graph(g: &mut Graph<'_>, logit: Var, y: f64, cfg: &FocalLossConfig) -> Result<Var> {
    if g.value(logit).len() != 1 {
        return Err(Error::contract(format!(
            "focal loss expects a single logit, got shape {:?}",
            g.value(logit).shape()
        )));
    }
    let p = g.sigmoid(logit);
    // p_t = y·p + (1−y)(1−p) = (2y−1)·p + (1−y)
    let signed = g.scale(p, 2.0 * y - 1.0);
    let pt = g.add_scalar(signed, 1.0 - y);
    let pt = g.clamp(pt, PT_CLAMP, 1.0 - PT_CLAMP);
    let neg = g.scale(pt, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let modulator = g.pow(one_minus, cfg.gamma);
    let log_pt = g.log(pt);
    let prod = g.hadamard(modulator, log_pt)?;
    let alpha_t = y * cfg.alpha + (1.0 - y) * (1.0 - cfg.alpha);
    let loss = g.scale(prod, -alpha_t);
    Ok(g.sum(loss))
}
