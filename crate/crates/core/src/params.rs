//! Named parameter collections shared by encoders, decoders, optimizers and
//! checkpoints.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::tensor::Tensor;

pub trait Parameterized {
    /// Parameter tensors in a fixed order.
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    /// Names aligned with [`Parameterized::params`].
    fn param_names(&self) -> Vec<String>;

    /// Registers every parameter as a borrowed leaf of `g`.
    fn bind<'a>(&'a self, g: &mut Graph<'a>, requires_grad: bool) -> Vec<Var> {
        self.params().into_iter().map(|t| g.param(t, requires_grad)).collect()
    }

    fn num_scalars(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }
}

/// Uniform Glorot initialization over `±√(6 / (fan_in + fan_out))`, stored as
/// a `fan_in × fan_out` matrix.
pub fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(&[fan_in, fan_out], data).expect("glorot shape")
}

pub fn zero_bias(width: usize) -> Tensor {
    Tensor::zeros(&[1, width])
}
