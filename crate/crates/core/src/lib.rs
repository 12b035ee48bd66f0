//! Differentially private gradient descent for generalized linear models.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix it to `f64`, which is what the experiment pipeline
//! uses. Privacy accounting is always carried out in `f64`.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod clipping;
pub mod diagnostics;
pub mod error;
pub mod glm;
mod linalg;
pub mod losses;
pub mod optimizer;
pub mod scalar;
pub mod subspace;

pub use error::{Error, Result};
pub use glm::{full_subgradient, objective_value, per_example_gradient, GlmLoss, ScalarLoss, SubgradientInterval};
pub use optimizer::{dpgd_run, BatchSpec, NoiseSpec, OptimizerConfig, OptimizerRun, OutputRule};
pub use scalar::Scalar;

pub type Dataset = glm::GlmDataset<f64>;
pub type Dataset32 = glm::GlmDataset<f32>;
pub type ModelVector = ndarray::Array1<f64>;
pub type Subspace = subspace::FeatureSubspace<f64>;
pub type Noise = optimizer::NoiseSpec<f64>;
pub type Config = optimizer::OptimizerConfig<f64>;
pub type Run = optimizer::OptimizerRun<f64>;
