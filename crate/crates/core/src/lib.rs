//! Sparse federated training of a small grid-based object detector.
//!
//! Clients train with an L1 penalty on batch-norm scale factors, prune channels below a
//! global |γ| threshold, and upload masked weights; the server aggregates with either
//! size-weighted averaging or inverse-sparsity weighting.

pub mod autodiff;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod federation;
pub mod rng;
pub mod sparsifier;
pub mod training;

pub use autodiff::{GradTape, Tensor, Var};
pub use detector::{DetectorConfig, LossConfig, ModelParams};
pub use error::{Error, Result};
