//! Excess empirical risk of private GD against feature rank and ambient dimension.

use std::path::{Path, PathBuf};

use dpglm::accountant::gaussian_sigma_for_budget;
use dpglm::glm::GlmDataset;
use dpglm::losses::LogisticLoss;
use dpglm::optimizer::account_run;
use dpglm::{dpgd_run, objective_value, Config, Noise, OutputRule};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RankScalingConfig;
use crate::data::{embed, latent_sample, LatentSample};
use crate::error::{BenchError, Result};
use crate::report::{fmt9, to_csv_string, to_json_string, write_file};
use crate::sweep::derive_seed;

const TAG_LATENT: u64 = 10;
const TAG_BASIS: u64 = 11;
const TAG_NOISE: u64 = 12;

#[derive(Debug, Clone, Serialize)]
pub struct RankCell {
    /// `dim` when the dimension varies at fixed rank, `rank` otherwise.
    pub series: &'static str,
    pub dimension: usize,
    pub rank: usize,
    pub excess: Vec<f64>,
    pub mean_excess: f64,
    pub std_excess: f64,
    pub stderr_excess: f64,
    pub sigma: f64,
    pub eps: f64,
    pub delta: f64,
    pub seed: u64,
    pub status: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RankReport {
    pub config: RankScalingConfig,
    pub cells: Vec<RankCell>,
}

/// Minimum of the logistic risk on the latent points by long noiseless GD.
///
/// Both `x = U z` and `z` give the same attainable risk because `U` has
/// orthonormal columns.
pub fn oracle_risk(latent: &LatentSample, iterations: usize, lr: f64) -> Result<f64> {
    let data = GlmDataset::new(latent.z.clone(), latent.y.clone())?;
    let mut cfg = Config::new(iterations, lr);
    cfg.output = OutputRule::LastIterate;
    cfg.log_every = 0;
    let run = dpgd_run(&data, &LogisticLoss, &cfg, &Noise::None)?;
    Ok(objective_value(&LogisticLoss, &data, run.output.view())?)
}

fn private_config(cfg: &RankScalingConfig, seed: u64) -> Config {
    let mut c = Config::new(cfg.iterations, cfg.learning_rate);
    c.log_every = 0;
    c.seed = seed;
    c.output = cfg.output;
    c
}

/// Noise standard deviation of the averaged full-batch gradient for the configured budget.
pub fn rank_sigma(cfg: &RankScalingConfig) -> Result<f64> {
    if !cfg.private {
        return Ok(0.0);
    }
    Ok(gaussian_sigma_for_budget(
        1.0,
        cfg.iterations,
        cfg.n,
        cfg.eps,
        cfg.delta,
    )?)
}

fn one_seed(cfg: &RankScalingConfig, p: usize, r: usize, s: usize, sigma: f64) -> Result<(f64, f64)> {
    let latent = latent_sample(
        cfg.n,
        r,
        cfg.signal,
        0.0,
        derive_seed(cfg.seed, [TAG_LATENT, r as u64, s as u64]),
    )?;
    let best = oracle_risk(&latent, cfg.oracle_iterations, cfg.oracle_learning_rate)?;
    let data = embed(
        &latent,
        p,
        derive_seed(cfg.seed, [TAG_BASIS, p as u64, (r * 1000 + s) as u64]),
    )?;
    let noise = if cfg.private {
        Noise::gaussian(sigma)
    } else {
        Noise::None
    };
    let run_cfg = private_config(cfg, derive_seed(cfg.seed, [TAG_NOISE, r as u64, s as u64]));
    let run = dpgd_run(&data, &LogisticLoss, &run_cfg, &noise)?;
    let risk = objective_value(&LogisticLoss, &data, run.output.view())?;
    let eps = account_run(&data, &LogisticLoss, &run_cfg, &noise, cfg.delta)?.eps;
    Ok((risk - best, eps))
}

fn cell(cfg: &RankScalingConfig, series: &'static str, p: usize, r: usize, sigma: f64) -> RankCell {
    let results: Vec<Result<(f64, f64)>> = (0..cfg.seeds)
        .into_par_iter()
        .map(|s| one_seed(cfg, p, r, s, sigma))
        .collect();
    let mut excess = Vec::new();
    let mut eps = f64::NAN;
    let mut status = "ok".to_string();
    for res in results {
        match res {
            Ok((e, acct)) => {
                excess.push(e);
                eps = acct;
            }
            Err(e) => status = format!("error: {e}"),
        }
    }
    let k = excess.len() as f64;
    let mean = excess.iter().sum::<f64>() / k;
    let std = if excess.len() > 1 {
        (excess.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (k - 1.0)).sqrt()
    } else {
        0.0
    };
    RankCell {
        series,
        dimension: p,
        rank: r,
        excess,
        mean_excess: mean,
        std_excess: std,
        stderr_excess: std / k.sqrt(),
        sigma,
        eps,
        delta: if cfg.private { cfg.delta } else { 0.0 },
        seed: cfg.seed,
        status,
    }
}

/// Mean excess risk over `seeds` draws for each dimension at `fixed_rank` and
/// each rank at `fixed_dim`. Latent data, labels and noise seeds are shared
/// across dimensions; only the embedding changes.
pub fn run_rank_scaling(cfg: &RankScalingConfig) -> Result<RankReport> {
    cfg.validate()?;
    let sigma = rank_sigma(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| BenchError::Config(format!("thread pool: {e}")))?;
    let cells = pool.install(|| {
        let mut cells: Vec<RankCell> = cfg
            .dims
            .iter()
            .map(|&p| cell(cfg, "dim", p, cfg.fixed_rank, sigma))
            .collect();
        cells.extend(cfg.ranks.iter().map(|&r| cell(cfg, "rank", cfg.fixed_dim, r, sigma)));
        cells
    });
    Ok(RankReport {
        config: cfg.clone(),
        cells,
    })
}

pub const RANK_CSV_HEADER: [&str; 11] = [
    "series",
    "dimension",
    "rank",
    "mean_excess",
    "std_excess",
    "stderr_excess",
    "sigma",
    "eps",
    "delta",
    "seed",
    "status",
];

pub fn rank_csv(report: &RankReport) -> Result<String> {
    let rows: Vec<Vec<String>> = report
        .cells
        .iter()
        .map(|c| {
            vec![
                c.series.to_string(),
                c.dimension.to_string(),
                c.rank.to_string(),
                fmt9(c.mean_excess),
                fmt9(c.std_excess),
                fmt9(c.stderr_excess),
                fmt9(c.sigma),
                fmt9(c.eps),
                fmt9(c.delta),
                c.seed.to_string(),
                c.status.clone(),
            ]
        })
        .collect();
    to_csv_string(&RANK_CSV_HEADER, &rows)
}

pub fn rank_tsv(report: &RankReport) -> String {
    let mut out = String::from("# dimension\trank\tmean_excess\tstderr_excess\n");
    for (b, series) in ["dim", "rank"].iter().enumerate() {
        if b > 0 {
            out.push_str("\n\n");
        }
        for c in report.cells.iter().filter(|c| c.series == *series) {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                c.dimension,
                c.rank,
                fmt9(c.mean_excess),
                fmt9(c.stderr_excess)
            ));
        }
    }
    out
}

const RANK_GNUPLOT: &str = "set logscale x
set ylabel \"excess empirical risk\"
set multiplot layout 1,2
set xlabel \"dimension\"
plot \"rank.tsv\" index 0 using 1:3:4 with yerrorlines title \"fixed rank\"
set xlabel \"rank\"
plot \"rank.tsv\" index 1 using 2:3:4 with yerrorlines title \"fixed dimension\"
unset multiplot
";

/// Writes `rank.csv`, `rank.json`, `rank.tsv` and `rank.gp` into `dir`.
pub fn write_rank_outputs(report: &RankReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let files = [
        ("rank.csv", rank_csv(report)?),
        ("rank.json", to_json_string(report)?),
        ("rank.tsv", rank_tsv(report)),
        ("rank.gp", RANK_GNUPLOT.to_string()),
    ];
    let mut out = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        write_file(&path, &text)?;
        out.push(path);
    }
    Ok(out)
}
