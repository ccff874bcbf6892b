//! Spatio-temporal cross-attention classification of cine clips from paired
//! image and segmentation embedding sequences.
//!
//! The crate carries its own small reverse-mode autodiff tape, the stack
//! encoders and attention decoder built on it, a staged training pipeline,
//! cross-validated evaluation and a synthetic data generator.

pub mod attention;
pub mod autodiff;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod ingest;
pub mod model;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, ErrorClass, Result};
pub use exec::Exec;
pub use tensor::Tensor;
