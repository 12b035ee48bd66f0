//! Dataset ingestion, preprocessing and synthetic generators.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use dpglm::glm::GlmDataset;
use dpglm::subspace::{feature_projector, DEFAULT_REL_TOL};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, BenchError, Result};

/// Environment variable naming a directory searched for relative dataset paths.
pub const DATA_DIR_ENV: &str = "DPGLM_DATA_DIR";

/// Radius each preprocessed sample is projected onto before the constant feature.
pub fn projection_radius() -> f64 {
    (8.0f64 / 9.0).sqrt()
}

/// Value of the appended constant feature.
pub const CONSTANT_FEATURE: f64 = 1.0 / 3.0;

/// Resolves a dataset path. Relative paths are looked up in `$DPGLM_DATA_DIR`
/// first, then taken as given.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_relative() {
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
            let candidate = Path::new(&dir).join(path);
            if candidate.exists() {
                return candidate;
            }
        }
    }
    path.to_path_buf()
}

/// Parses `label index:value ...` lines with 1-based indices. Blank lines and
/// `#` comments are skipped; missing indices are zero and the width is the
/// largest index seen anywhere in the input.
pub fn parse_sparse<R: BufRead>(reader: R, source_name: &str) -> Result<GlmDataset<f64>> {
    let err = |line: usize, msg: String| BenchError::Parse {
        source_name: source_name.to_string(),
        line,
        msg,
    };
    let mut labels = Vec::new();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut width = 0usize;
    for (k, line) in reader.lines().enumerate() {
        let lineno = k + 1;
        let line = line.map_err(|e| err(lineno, e.to_string()))?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let mut tokens = body.split_whitespace();
        let label_tok = tokens.next().expect("nonempty line has a token");
        let label: f64 = label_tok
            .parse()
            .map_err(|_| err(lineno, format!("bad label {label_tok:?}")))?;
        if !label.is_finite() {
            return Err(err(lineno, format!("non-finite label {label_tok:?}")));
        }
        let mut row = Vec::new();
        for tok in tokens {
            let (idx, val) = tok
                .split_once(':')
                .ok_or_else(|| err(lineno, format!("expected index:value, got {tok:?}")))?;
            let idx: usize = idx.parse().map_err(|_| err(lineno, format!("bad index {idx:?}")))?;
            if idx == 0 {
                return Err(err(lineno, "indices are 1-based".into()));
            }
            let val: f64 = val.parse().map_err(|_| err(lineno, format!("bad value {val:?}")))?;
            if !val.is_finite() {
                return Err(err(lineno, format!("non-finite value {val}")));
            }
            if row.iter().any(|&(j, _)| j == idx - 1) {
                return Err(err(lineno, format!("index {idx} repeated")));
            }
            width = width.max(idx);
            row.push((idx - 1, val));
        }
        labels.push(label);
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(err(0, "no examples".into()));
    }
    if width == 0 {
        return Err(err(0, "no features".into()));
    }
    let mut x = Array2::zeros((rows.len(), width));
    for (i, row) in rows.iter().enumerate() {
        for &(j, v) in row {
            x[[i, j]] = v;
        }
    }
    Ok(GlmDataset::new(x, Array1::from(labels))?)
}

/// Loads a sparse text dataset, resolving relative paths via `$DPGLM_DATA_DIR`.
pub fn load_sparse_dataset(path: &Path) -> Result<GlmDataset<f64>> {
    let resolved = resolve_data_path(path);
    let file = File::open(&resolved).map_err(io_err(&resolved))?;
    parse_sparse(BufReader::new(file), &resolved.display().to_string())
}

/// Per-feature min/max fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl PreprocessStats {
    pub fn fit(train: &GlmDataset<f64>) -> Self {
        let x = train.features();
        let mut min = vec![f64::INFINITY; x.ncols()];
        let mut max = vec![f64::NEG_INFINITY; x.ncols()];
        for row in x.rows() {
            for (j, &v) in row.iter().enumerate() {
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        Self { min, max }
    }

    /// Min-max scaling to `[-1/2, 1/2]`, projection to radius `sqrt(8/9)` and
    /// an appended constant `1/3`, so every output row has norm at most 1.
    /// Features constant on the fitting data map to 0.
    pub fn apply(&self, data: &GlmDataset<f64>) -> Result<GlmDataset<f64>> {
        let p = self.min.len();
        if data.stored_dim() != p {
            return Err(BenchError::Config(format!(
                "dimension mismatch: stats cover {p} features, data has {}",
                data.stored_dim()
            )));
        }
        let radius = projection_radius();
        let src = data.features();
        let mut x = Array2::zeros((data.n(), p + 1));
        for (i, row) in src.rows().into_iter().enumerate() {
            let mut sq = 0.0;
            for j in 0..p {
                let span = self.max[j] - self.min[j];
                let v = if span > 0.0 {
                    (row[j] - self.min[j]) / span - 0.5
                } else {
                    0.0
                };
                x[[i, j]] = v;
                sq += v * v;
            }
            let norm = sq.sqrt();
            if norm > radius {
                let f = radius / norm;
                for j in 0..p {
                    x[[i, j]] *= f;
                }
            }
            x[[i, p]] = CONSTANT_FEATURE;
        }
        Ok(GlmDataset::new(x, data.responses().clone())?.with_feature_norm_cap(1.0)?)
    }
}

/// Fits the scaling on `train` only and applies it to both splits.
pub fn preprocess(
    train: &GlmDataset<f64>,
    test: &GlmDataset<f64>,
) -> Result<(GlmDataset<f64>, GlmDataset<f64>, PreprocessStats)> {
    if train.stored_dim() != test.stored_dim() {
        return Err(BenchError::Config(format!(
            "train has {} features but test has {}",
            train.stored_dim(),
            test.stored_dim()
        )));
    }
    let stats = PreprocessStats::fit(train);
    Ok((stats.apply(train)?, stats.apply(test)?, stats))
}

/// Appends structurally-zero features up to `target_p`.
pub fn pad_dimensions(data: &GlmDataset<f64>, target_p: usize) -> Result<GlmDataset<f64>> {
    Ok(data.clone().with_dim(target_p)?)
}

/// Train and test samples from one planted-rank logistic model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedRankSpec {
    pub n_train: usize,
    pub n_test: usize,
    /// Ambient dimension of the features.
    pub dim: usize,
    /// Dimension of the subspace the features live in.
    pub rank: usize,
    /// Multiplier on the planted margin; larger values give cleaner labels.
    pub signal: f64,
    /// Offset added to the planted margin; nonzero values unbalance the classes.
    #[serde(default)]
    pub offset: f64,
    pub seed: u64,
}

/// Latent part of a planted-rank sample: coordinates in `R^rank` and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z: Array2<f64>,
    pub y: Array1<f64>,
}

fn seeded(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Latent points `z ~ N(0, I / rank)` shrunk into the unit ball, labelled
/// `+1` with probability `sigmoid(signal <w, z> + offset)` for a random unit `w`.
pub fn latent_sample(n: usize, rank: usize, signal: f64, offset: f64, seed: u64) -> Result<LatentSample> {
    if n == 0 || rank == 0 {
        return Err(BenchError::Config("need n >= 1 and rank >= 1".into()));
    }
    let mut rng = seeded(seed, 0);
    let mut w = Array1::from_shape_fn(rank, |_| rng.sample::<f64, _>(StandardNormal));
    w /= w.dot(&w).sqrt();
    let scale = (rank as f64).sqrt();
    let mut z = Array2::from_shape_fn((n, rank), |_| rng.sample::<f64, _>(StandardNormal) / scale);
    let mut y = Array1::zeros(n);
    for (i, mut row) in z.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm > 1.0 {
            row /= norm;
        }
        let prob = 1.0 / (1.0 + (-(signal * row.dot(&w) + offset)).exp());
        y[i] = if rng.random::<f64>() < prob { 1.0 } else { -1.0 };
    }
    Ok(LatentSample { z, y })
}

/// Random `dim x rank` matrix with orthonormal columns.
pub fn random_orthonormal(dim: usize, rank: usize, seed: u64) -> Result<Array2<f64>> {
    if rank > dim {
        return Err(BenchError::Config(format!("rank {rank} exceeds dimension {dim}")));
    }
    let mut rng = seeded(seed, 1);
    let g = Array2::from_shape_fn((rank, dim), |_| rng.sample::<f64, _>(StandardNormal));
    let span = feature_projector(&GlmDataset::new(g, Array1::zeros(rank))?, DEFAULT_REL_TOL)?;
    if span.rank() != rank {
        return Err(BenchError::Config("degenerate random basis".into()));
    }
    Ok(span.basis().clone())
}

/// Embeds latent points as `x_i = U z_i` with `U` orthonormal, so norms,
/// labels and the achievable risk do not depend on `dim`.
pub fn embed(latent: &LatentSample, dim: usize, basis_seed: u64) -> Result<GlmDataset<f64>> {
    let u = random_orthonormal(dim, latent.z.ncols(), basis_seed)?;
    let x = latent.z.dot(&u.t());
    Ok(GlmDataset::new(x, latent.y.clone())?.with_feature_norm_cap(1.0)?)
}

/// Planted-rank logistic data split into train and test.
pub fn planted_rank_logistic(spec: &PlantedRankSpec) -> Result<(GlmDataset<f64>, GlmDataset<f64>)> {
    let n = spec.n_train + spec.n_test;
    if spec.n_train == 0 || spec.n_test == 0 {
        return Err(BenchError::Config("n_train and n_test must be positive".into()));
    }
    let latent = latent_sample(n, spec.rank, spec.signal, spec.offset, spec.seed)?;
    let all = embed(&latent, spec.dim, spec.seed)?;
    let train: Vec<usize> = (0..spec.n_train).collect();
    let test: Vec<usize> = (spec.n_train..n).collect();
    Ok((all.select_rows(&train)?, all.select_rows(&test)?))
}

/// Fraction of rows whose margin sign matches a `+-1` label; zero margins
/// predict `+1`.
pub fn accuracy(data: &GlmDataset<f64>, theta: &Array1<f64>) -> Result<f64> {
    let stored = data.stored_dim();
    let head = theta.slice(ndarray::s![..stored]);
    let margins = data.features().dot(&head);
    let hits = margins
        .iter()
        .zip(data.responses())
        .filter(|(&m, &y)| (m >= 0.0) == (y > 0.0))
        .count();
    Ok(hits as f64 / data.n() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sparse_line() {
        let d = parse_sparse("1 1:0.5 3:-0.2\n".as_bytes(), "t").unwrap();
        assert_eq!(d.features().row(0).to_vec(), vec![0.5, 0.0, -0.2]);
        assert_eq!(d.response(0), 1.0);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(parse_sparse("".as_bytes(), "t").is_err());
        assert!(parse_sparse("\n# only a comment\n".as_bytes(), "t").is_err());
    }

    #[test]
    fn reports_line_numbers() {
        let err = parse_sparse("1 1:2\n-1 2:x\n".as_bytes(), "t").unwrap_err();
        match err {
            BenchError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("{other}"),
        }
        assert!(parse_sparse("1 0:1\n".as_bytes(), "t").is_err());
        assert!(parse_sparse("1 2\n".as_bytes(), "t").is_err());
        assert!(parse_sparse("1 2:1 2:3\n".as_bytes(), "t").is_err());
    }

    #[test]
    fn densifies_to_global_width() {
        let d = parse_sparse("1 2:1\n-1 5:2 # trailing\n\n1\n".as_bytes(), "t").unwrap();
        assert_eq!(d.n(), 3);
        assert_eq!(d.stored_dim(), 5);
        assert_eq!(d.features()[[1, 4]], 2.0);
        assert!(d.features().row(2).iter().all(|&v| v == 0.0));
    }
}
