use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub trait Optimizer {
    /// Applies one update to `params` given gradients of the same shapes.
    fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()>;
}

fn check_shapes(params: &[&mut Tensor], grads: &[Tensor], state: &[Vec<f64>]) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.len() {
        return Err(Error::contract(format!(
            "optimizer got {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    for ((p, g), s) in params.iter().zip(grads).zip(state) {
        if p.shape() != g.shape() || s.len() != p.len() {
            return Err(Error::dim("optimizer", p.shape(), g.shape()));
        }
    }
    Ok(())
}

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(shapes: &[&Tensor], momentum: f64) -> Self {
        Self {
            momentum,
            velocity: shapes.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
        check_shapes(&params, grads, &self.velocity)?;
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *w -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay applied before the moment update.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(shapes: &[&Tensor], beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: shapes.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: shapes.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

impl Optimizer for AdamW {
    fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
        check_shapes(&params, grads, &self.m)?;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w -= lr * self.weight_decay * *w;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
