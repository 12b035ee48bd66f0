//! Strict TOML experiment configs. Unknown keys are errors; see `docs/config.md`.

use std::path::{Path, PathBuf};

use dpglm::losses::LossName;
use dpglm::OutputRule;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::PlantedRankSpec;
use crate::error::{io_err, BenchError, Result};

/// Learning rates `{1, 2, 5} x 10^i` for `i` in `-1..=1`.
pub fn default_learning_rates() -> Vec<f64> {
    let mut out = Vec::new();
    for e in -1..=1 {
        for m in [1.0, 2.0, 5.0] {
            out.push(m * 10f64.powi(e));
        }
    }
    out
}

/// Desk-scale padding grid.
pub fn default_pads() -> Vec<usize> {
    vec![9, 20, 50, 100, 200, 500, 1000, 2000, 5000, 10000]
}

/// Padding grid `{1, 2, 5} x 10^i` for `i` in `1..=4`.
pub fn full_pads() -> Vec<usize> {
    let mut out = Vec::new();
    for e in 1..=4u32 {
        for m in [1, 2, 5] {
            out.push(m * 10usize.pow(e));
        }
    }
    out
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

fn default_true() -> bool {
    true
}

fn default_delta() -> f64 {
    1e-5
}

fn default_loss() -> LossName {
    LossName::Logistic
}

fn default_select_epochs() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Sparse `label index:value` files; relative paths honour `DPGLM_DATA_DIR`.
    Libsvm {
        train: PathBuf,
        test: PathBuf,
    },
    Synthetic(PlantedRankSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessToggles {
    /// Min-max scaling, projection and constant feature.
    #[serde(default = "default_true")]
    pub enabled: bool,
}

impl Default for PreprocessToggles {
    fn default() -> Self {
        Self { enabled: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerTemplate {
    /// Expected Poisson batch size; `q = batch_size / n`.
    pub batch_size: usize,
    pub epochs: usize,
    /// Per-example clip norm; absent means no clipping.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    /// Learning rates are ranked by mean test accuracy over this many final epochs.
    #[serde(default = "default_select_epochs")]
    pub select_last_epochs: usize,
}

/// Noise calibrated to the batch-average sensitivity `C / (q n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseConfig {
    None,
    /// Standard deviation `noise_multiplier` times the sensitivity.
    Gaussian {
        noise_multiplier: f64,
    },
    /// Gamma magnitude scale `scale` times the sensitivity.
    Gamma {
        scale: f64,
    },
}

impl NoiseConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            NoiseConfig::None => "none",
            NoiseConfig::Gaussian { .. } => "gaussian",
            NoiseConfig::Gamma { .. } => "gamma",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir", skip_serializing)]
    pub output_dir: PathBuf,
    #[serde(default = "default_loss")]
    pub loss: LossName,
    pub data: DataSource,
    #[serde(default)]
    pub preprocess: PreprocessToggles,
    #[serde(default = "default_pads")]
    pub pads: Vec<usize>,
    #[serde(default = "default_learning_rates")]
    pub learning_rates: Vec<f64>,
    pub repeats: usize,
    #[serde(default = "default_delta")]
    pub delta: f64,
    pub optimizer: OptimizerTemplate,
    pub noise: Vec<NoiseConfig>,
    /// Worker threads; 0 uses all cores. Not part of the run record.
    #[serde(default, skip_serializing)]
    pub threads: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(BenchError::Config(m));
        if self.learning_rates.is_empty() {
            return bad("learning_rates must be nonempty".into());
        }
        if let Some(lr) = self.learning_rates.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return bad(format!("learning rate {lr} must be positive"));
        }
        if self.pads.is_empty() {
            return bad("pads must be nonempty".into());
        }
        if self.repeats == 0 {
            return bad("repeats must be at least 1".into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if self.noise.is_empty() {
            return bad("at least one noise entry is required".into());
        }
        for (i, a) in self.noise.iter().enumerate() {
            if self.noise[..i].iter().any(|b| b.kind() == a.kind()) {
                return bad(format!("noise kind {} listed twice", a.kind()));
            }
            match *a {
                NoiseConfig::Gaussian { noise_multiplier: z } if !(z > 0.0 && z.is_finite()) => {
                    return bad(format!("noise_multiplier must be positive, got {z}"));
                }
                NoiseConfig::Gamma { scale } if !(scale > 0.0 && scale.is_finite()) => {
                    return bad(format!("gamma scale must be positive, got {scale}"));
                }
                _ => {}
            }
        }
        let o = &self.optimizer;
        if o.batch_size == 0 || o.epochs == 0 || o.select_last_epochs == 0 {
            return bad("batch_size, epochs and select_last_epochs must be positive".into());
        }
        if let Some(b) = o.clip_norm {
            if !(b > 0.0 && b.is_finite()) {
                return bad(format!("clip_norm must be positive, got {b}"));
            }
        }
        if self.loss == LossName::Softmax {
            return bad("the sweep trains scalar GLM losses only".into());
        }
        Ok(())
    }
}

/// Rank-scaling study on planted-rank logistic data with full-batch private GD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankScalingConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir", skip_serializing)]
    pub output_dir: PathBuf,
    pub n: usize,
    pub signal: f64,
    /// Rank held fixed while the ambient dimension varies.
    pub fixed_rank: usize,
    pub dims: Vec<usize>,
    /// Ambient dimension held fixed while the rank varies.
    pub fixed_dim: usize,
    pub ranks: Vec<usize>,
    pub seeds: usize,
    pub eps: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    /// `average_iterate` (default) or `last_iterate`.
    #[serde(default)]
    pub output: OutputRule,
    pub oracle_iterations: usize,
    pub oracle_learning_rate: f64,
    /// Set to false for the noiseless sanity run.
    #[serde(default = "default_true")]
    pub private: bool,
    #[serde(default, skip_serializing)]
    pub threads: usize,
}

impl RankScalingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BenchError::Config(m.into()));
        if self.n == 0 || self.seeds == 0 || self.iterations == 0 || self.oracle_iterations == 0 {
            return bad("n, seeds, iterations and oracle_iterations must be positive");
        }
        if self.dims.is_empty() || self.ranks.is_empty() {
            return bad("dims and ranks must be nonempty");
        }
        if self.dims.iter().any(|&p| p < self.fixed_rank) || self.ranks.iter().any(|&r| r == 0 || r > self.fixed_dim) {
            return bad("every rank must lie in 1..=dimension");
        }
        if self.fixed_rank == 0 {
            return bad("fixed_rank must be positive");
        }
        if !(self.eps > 0.0) || !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("eps must be positive and delta in (0, 1)");
        }
        if !(self.learning_rate > 0.0) || !(self.oracle_learning_rate > 0.0) || !self.signal.is_finite() {
            return bad("learning rates must be positive and signal finite");
        }
        Ok(())
    }
}

/// Parses a strict TOML document.
pub fn from_toml_str<C: DeserializeOwned>(text: &str) -> Result<C> {
    toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))
}

pub fn load_toml<C: DeserializeOwned>(path: &Path) -> Result<C> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    from_toml_str(&text).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        seed = 3
        repeats = 2
        pads = [9, 100]
        [data]
        kind = "synthetic"
        n_train = 100
        n_test = 50
        dim = 8
        rank = 8
        signal = 4.0
        seed = 1
        [optimizer]
        batch_size = 10
        epochs = 2
        [[noise]]
        kind = "gaussian"
        noise_multiplier = 0.63
    "#;

    #[test]
    fn parses_minimal_config() {
        let cfg: ExperimentConfig = from_toml_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.learning_rates, default_learning_rates());
        assert_eq!(cfg.delta, 1e-5);
        assert!(cfg.preprocess.enabled);
        assert_eq!(cfg.optimizer.select_last_epochs, 5);
    }

    #[test]
    fn unknown_keys_are_errors() {
        for (from, to) in [
            ("seed = 3", "seed = 3\nbogus = 1"),
            ("signal = 4.0", "signal = 4.0\nextra = 2"),
            ("epochs = 2", "epochs = 2\nmomentum = 0.9"),
            ("noise_multiplier = 0.63", "noise_multiplier = 0.63\nscale = 1.0"),
        ] {
            let text = MINIMAL.replace(from, to);
            assert!(from_toml_str::<ExperimentConfig>(&text).is_err(), "{to}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg: ExperimentConfig = from_toml_str(MINIMAL).unwrap();
        cfg.learning_rates.clear();
        assert!(cfg.validate().is_err());
        let mut cfg: ExperimentConfig = from_toml_str(MINIMAL).unwrap();
        cfg.repeats = 0;
        assert!(cfg.validate().is_err());
        let mut cfg: ExperimentConfig = from_toml_str(MINIMAL).unwrap();
        cfg.noise.push(NoiseConfig::Gaussian { noise_multiplier: 1.0 });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn grids() {
        assert_eq!(default_learning_rates().len(), 9);
        assert_eq!(full_pads().len(), 12);
        assert!(default_pads().iter().all(|p| full_pads().contains(p) || *p == 9));
    }
}
