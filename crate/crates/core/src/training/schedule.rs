use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Cosine annealing from `lr_max` at `t = 0` to `lr_min` at `t = t_max`.
pub fn cosine_lr(t: usize, t_max: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if t_max == 0 {
        return Err(Error::contract("cosine schedule needs t_max ≥ 1"));
    }
    if t > t_max {
        return Err(Error::contract(format!("epoch {t} is past t_max {t_max}")));
    }
    Ok(lr_min + (lr_max - lr_min) * (1.0 + (PI * t as f64 / t_max as f64).cos()) / 2.0)
}
