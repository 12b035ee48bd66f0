//! Experiment pipeline for private GLM training: data ingestion and
//! preprocessing, dimension and rank sweeps, and report emission.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod data;
pub mod error;
pub mod rank;
pub mod report;
pub mod sweep;

pub use config::{ExperimentConfig, RankScalingConfig};
pub use error::{BenchError, Result};
pub use rank::run_rank_scaling;
pub use sweep::run_dimension_sweep;
