//! Few-shot multivariate time-series classification.
//!
//! The crate bundles a small f64 reverse-mode autodiff engine, a residual
//! 1-D convolutional backbone, a prototypical loss with nearest-centroid
//! prediction, SGD-with-momentum plus a sharpness-aware (perturb-then-update)
//! wrapper, a UEA `.ts` data pipeline, and the experiment harness that ties
//! them together.

pub mod backbone;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod loss;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Parameter, Parameterized, Tensor};
