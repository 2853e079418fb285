//! Attention-guided token-level mixup for transformer encoders.
//!
//! The crate augments training batches two ways, both driven by attention
//! saliency. [`htm`] replaces low-saliency tokens of easy instances with
//! high-saliency tokens from optimally assigned batch peers and relabels
//! the result; [`vtm`] widens one layer's attention keys and values with
//! the most salient tokens pooled from earlier layers. [`scorenet`] gates
//! both by per-instance difficulty. Everything runs on the self-contained
//! reverse-mode engine in [`numerics`], on the small vision transformer in
//! [`transformer`], and is orchestrated end to end by [`train`] and
//! [`harness`].

pub mod error;
pub mod harness;
pub mod htm;
pub mod numerics;
pub mod rng;
pub mod saliency;
pub mod scalar;
pub mod scorenet;
pub mod train;
pub mod transformer;
pub mod vtm;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Working-precision tensor used by the training harness.
pub type Tensor32 = numerics::Tensor<f32>;
/// High-precision tensor used by gradient oracles.
pub type Tensor64 = numerics::Tensor<f64>;
pub type Graph32 = numerics::Graph<f32>;
pub type Graph64 = numerics::Graph<f64>;
/// Working-precision model, the one the CLI trains.
pub type Model32 = transformer::Model<f32>;
/// High-precision model used by finite-difference checks.
pub type Model64 = transformer::Model<f64>;
