//! Spatial pyramid attentive pooling for GAN generators and discriminators,
//! built on a small reverse-mode autodiff engine.
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the crate-root
//! aliases fix double precision, which is what the training loop and the
//! gradient checks use.

pub mod arch;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod pnm;
pub mod rng;
pub mod scalar;
pub mod spap;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = graph::Graph<f64>;
