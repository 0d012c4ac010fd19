//! Joint task/flow training with adversarial synthesis of out-of-domain
//! samples, so a model trained on a single source domain holds up on
//! domains it never saw.
//!
//! The pieces:
//! - [`tape`]: reverse-mode autodiff over dense f64 tensors.
//! - [`data`]: IDX parsing plus procedural digit, color-shift, and
//!   articulated-hand landmark generators.
//! - [`model`]: the small convolutional task network and its losses.
//! - [`flow`]: invertible affine-coupling flow with exact log-determinants.
//! - [`gaussians`]: learnable class-conditional Gaussian latent structure.
//! - [`trainer`]: alternating minimization / adversarial maximization.

pub mod data;
pub mod error;
pub mod fdcheck;
pub mod flow;
pub mod gaussians;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod seeds;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{DegiaError, Result};
pub use tensor::Tensor;
