//! Test accuracy against padded dimension for each noise kind.

use std::path::{Path, PathBuf};

use dpglm::accountant::AccountingSummary;
use dpglm::glm::GlmDataset;
use dpglm::optimizer::{account_run, per_example_sensitivity};
use dpglm::{dpgd_run, BatchSpec, Config, Noise, OutputRule};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{DataSource, ExperimentConfig, NoiseConfig};
use crate::data::{accuracy, load_sparse_dataset, pad_dimensions, planted_rank_logistic, preprocess, PreprocessStats};
use crate::error::{BenchError, Result};
use crate::report::{fmt9, to_csv_string, to_json_string, write_file};

/// Seed for one job, derived from the master seed and a job tag.
pub fn derive_seed(master: u64, tag: [u64; 3]) -> u64 {
    let mut rng = ChaCha20Rng::seed_from_u64(master);
    rng.set_stream((tag[0] << 48) | (tag[1] << 24) | tag[2]);
    rng.next_u64()
}

const ROLE_SELECT: u64 = 1;
const ROLE_REPEAT: u64 = 2;

#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: GlmDataset<f64>,
    pub test: GlmDataset<f64>,
    pub stats: Option<PreprocessStats>,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let (train, test) = match &cfg.data {
        DataSource::Libsvm { train, test } => (load_sparse_dataset(train)?, load_sparse_dataset(test)?),
        DataSource::Synthetic(spec) => planted_rank_logistic(spec)?,
    };
    let loss = cfg.loss.scalar_loss::<f64>()?;
    train.check_labels(loss.as_ref())?;
    test.check_labels(loss.as_ref())?;
    if cfg.preprocess.enabled {
        let (train, test, stats) = preprocess(&train, &test)?;
        Ok(PreparedData {
            train,
            test,
            stats: Some(stats),
        })
    } else {
        Ok(PreparedData {
            train,
            test,
            stats: None,
        })
    }
}

/// Step schedule shared by every run of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Schedule {
    pub q: f64,
    pub steps_per_epoch: usize,
    pub iterations: usize,
}

impl Schedule {
    pub fn new(n: usize, batch_size: usize, epochs: usize) -> Self {
        let steps_per_epoch = n.div_ceil(batch_size);
        Self {
            q: (batch_size as f64 / n as f64).min(1.0),
            steps_per_epoch,
            iterations: steps_per_epoch * epochs,
        }
    }

    fn batch(&self) -> BatchSpec {
        if self.q < 1.0 {
            BatchSpec::Poisson { q: self.q }
        } else {
            BatchSpec::Full
        }
    }
}

fn optimizer_config(cfg: &ExperimentConfig, sched: &Schedule, lr: f64, seed: u64) -> Config {
    let mut c = Config::new(sched.iterations, lr);
    c.batch = sched.batch();
    c.clip_norm = cfg.optimizer.clip_norm.unwrap_or(f64::INFINITY);
    c.output = OutputRule::LastIterate;
    c.log_every = sched.steps_per_epoch;
    c.seed = seed;
    c
}

/// Noise for a batch-average sensitivity `sensitivity`.
pub fn calibrated_noise(nc: &NoiseConfig, sensitivity: f64) -> Noise {
    match *nc {
        NoiseConfig::None => Noise::None,
        NoiseConfig::Gaussian { noise_multiplier } => Noise::gaussian(noise_multiplier * sensitivity),
        NoiseConfig::Gamma { scale } => Noise::Gamma {
            epsilon0: 1.0 / scale,
            sensitivity,
        },
    }
}

/// Privacy of one noise kind, identical across pads.
#[derive(Debug, Clone, Serialize)]
pub struct NoiseAccounting {
    pub noise_kind: String,
    pub noise: Noise,
    pub summary: AccountingSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub dimension: usize,
    pub noise_kind: String,
    pub lr: f64,
    /// `select` for the learning-rate search, `repeat` for the reported runs.
    pub role: &'static str,
    pub index: usize,
    pub seed: u64,
    pub epoch_accuracy: Vec<f64>,
    pub score: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub dimension: usize,
    pub noise_kind: String,
    pub lr: f64,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub stderr_acc: f64,
    pub eps: f64,
    pub delta: f64,
    pub seed: u64,
    pub repeat_seeds: Vec<u64>,
    pub status: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub config: ExperimentConfig,
    pub schedule: Schedule,
    pub n_train: usize,
    pub n_test: usize,
    pub preprocess: Option<PreprocessStats>,
    pub accounting: Vec<NoiseAccounting>,
    pub rows: Vec<SweepRow>,
    pub runs: Vec<RunRecord>,
}

struct Job {
    pad: usize,
    noise_idx: usize,
    lr: f64,
    role: u64,
    index: usize,
    seed: u64,
}

fn run_job(cfg: &ExperimentConfig, data: &PreparedData, sched: &Schedule, noise: &Noise, job: &Job) -> RunRecord {
    let mut rec = RunRecord {
        dimension: job.pad,
        noise_kind: noise.kind().to_string(),
        lr: job.lr,
        role: if job.role == ROLE_SELECT { "select" } else { "repeat" },
        index: job.index,
        seed: job.seed,
        epoch_accuracy: Vec::new(),
        score: None,
        error: None,
    };
    let result = (|| -> Result<Vec<f64>> {
        let train = pad_dimensions(&data.train, job.pad)?;
        let loss = cfg.loss.scalar_loss::<f64>()?;
        let run = dpgd_run(
            &train,
            loss.as_ref(),
            &optimizer_config(cfg, sched, job.lr, job.seed),
            noise,
        )?;
        run.iterates[1..]
            .iter()
            .map(|theta| accuracy(&data.test, theta))
            .collect()
    })();
    match result {
        Ok(acc) => {
            let k = cfg.optimizer.select_last_epochs.min(acc.len());
            rec.score = Some(acc[acc.len() - k..].iter().sum::<f64>() / k as f64);
            rec.epoch_accuracy = acc;
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Best learning rate by score; failed runs never win and ties go to the smaller rate.
fn select_lr(records: &[&RunRecord]) -> Option<f64> {
    let mut sorted: Vec<&&RunRecord> = records.iter().filter(|r| r.score.is_some()).collect();
    sorted.sort_by(|a, b| a.lr.total_cmp(&b.lr));
    let mut best: Option<(f64, f64)> = None;
    for r in sorted {
        let s = r.score.expect("filtered");
        if best.is_none_or(|(bs, _)| s > bs) {
            best = Some((s, r.lr));
        }
    }
    best.map(|(_, lr)| lr)
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| BenchError::Config(format!("thread pool: {e}")))
}

/// Runs the learning-rate search and the repeats for every pad and noise kind.
///
/// Job seeds depend on the noise kind, learning rate and repeat but not on
/// the pad, so runs that differ only in padding share their randomness.
pub fn run_dimension_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    run_dimension_sweep_on(cfg, data)
}

/// [`run_dimension_sweep`] on already prepared data.
pub fn run_dimension_sweep_on(cfg: &ExperimentConfig, data: PreparedData) -> Result<SweepReport> {
    cfg.validate()?;
    let native = data.train.dim();
    if let Some(&p) = cfg.pads.iter().find(|&&p| p < native) {
        return Err(BenchError::Config(format!(
            "pad {p} is below the native dimension {native}"
        )));
    }
    let n = data.train.n();
    let sched = Schedule::new(n, cfg.optimizer.batch_size, cfg.optimizer.epochs);
    let loss = cfg.loss.scalar_loss::<f64>()?;
    let clip = cfg.optimizer.clip_norm.unwrap_or(f64::INFINITY);
    let c = per_example_sensitivity(&data.train, loss.as_ref(), clip);
    let mut noises = Vec::new();
    let mut accounting = Vec::new();
    for nc in &cfg.noise {
        let noise = match (nc, c) {
            (NoiseConfig::None, _) => Noise::None,
            (_, Some(c)) => calibrated_noise(nc, c / (sched.q * n as f64)),
            (_, None) => {
                return Err(BenchError::Config(
                    "private noise needs clip_norm or a Lipschitz loss on bounded features".into(),
                ))
            }
        };
        let probe = optimizer_config(cfg, &sched, 1.0, cfg.seed);
        let summary = account_run(&data.train, loss.as_ref(), &probe, &noise, cfg.delta)?;
        accounting.push(NoiseAccounting {
            noise_kind: nc.kind().into(),
            noise,
            summary,
        });
        noises.push(noise);
    }

    let pool = pool(cfg.threads)?;
    let mut lrs = cfg.learning_rates.clone();
    lrs.sort_by(f64::total_cmp);
    lrs.dedup();

    let mut select_jobs = Vec::new();
    for &pad in &cfg.pads {
        for ni in 0..noises.len() {
            for (li, &lr) in lrs.iter().enumerate() {
                select_jobs.push(Job {
                    pad,
                    noise_idx: ni,
                    lr,
                    role: ROLE_SELECT,
                    index: li,
                    seed: derive_seed(cfg.seed, [ROLE_SELECT, ni as u64, li as u64]),
                });
            }
        }
    }
    let select_runs: Vec<RunRecord> = pool.install(|| {
        select_jobs
            .par_iter()
            .map(|j| run_job(cfg, &data, &sched, &noises[j.noise_idx], j))
            .collect()
    });

    let mut chosen = Vec::new();
    for &pad in &cfg.pads {
        for ni in 0..noises.len() {
            let cell: Vec<&RunRecord> = select_runs
                .iter()
                .zip(&select_jobs)
                .filter(|(_, j)| j.pad == pad && j.noise_idx == ni)
                .map(|(r, _)| r)
                .collect();
            chosen.push((pad, ni, select_lr(&cell), cell.iter().find_map(|r| r.error.clone())));
        }
    }

    let mut repeat_jobs = Vec::new();
    for &(pad, ni, lr, _) in &chosen {
        if let Some(lr) = lr {
            for r in 0..cfg.repeats {
                repeat_jobs.push(Job {
                    pad,
                    noise_idx: ni,
                    lr,
                    role: ROLE_REPEAT,
                    index: r,
                    seed: derive_seed(cfg.seed, [ROLE_REPEAT, ni as u64, r as u64]),
                });
            }
        }
    }
    let repeat_runs: Vec<RunRecord> = pool.install(|| {
        repeat_jobs
            .par_iter()
            .map(|j| run_job(cfg, &data, &sched, &noises[j.noise_idx], j))
            .collect()
    });

    let mut rows = Vec::new();
    for (pad, ni, lr, select_err) in chosen {
        let acct = &accounting[ni].summary;
        let runs: Vec<&RunRecord> = repeat_runs
            .iter()
            .zip(&repeat_jobs)
            .filter(|(_, j)| j.pad == pad && j.noise_idx == ni)
            .map(|(r, _)| r)
            .collect();
        let scores: Vec<f64> = runs.iter().filter_map(|r| r.score).collect();
        let failures: Vec<String> = runs.iter().filter_map(|r| r.error.clone()).collect();
        let status = match (lr, failures.first()) {
            (None, _) => format!("error: no learning rate succeeded ({})", select_err.unwrap_or_default()),
            (Some(_), Some(e)) => format!("error: {} of {} repeats failed ({e})", failures.len(), runs.len()),
            _ => "ok".into(),
        };
        let (mean, std) = if scores.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            mean_std(&scores)
        };
        rows.push(SweepRow {
            dimension: pad,
            noise_kind: noises[ni].kind().into(),
            lr: lr.unwrap_or(f64::NAN),
            mean_acc: mean,
            std_acc: std,
            stderr_acc: std / (scores.len() as f64).sqrt(),
            eps: acct.eps,
            delta: if noises[ni].is_private() { cfg.delta } else { 0.0 },
            seed: cfg.seed,
            repeat_seeds: runs.iter().map(|r| r.seed).collect(),
            status,
        });
    }
    rows.sort_by(|a, b| {
        a.dimension
            .cmp(&b.dimension)
            .then(noise_rank(cfg, &a.noise_kind).cmp(&noise_rank(cfg, &b.noise_kind)))
    });

    let mut runs = select_runs;
    runs.extend(repeat_runs);
    runs.sort_by(|a, b| {
        (a.dimension, noise_rank(cfg, &a.noise_kind), a.role, a.index).cmp(&(
            b.dimension,
            noise_rank(cfg, &b.noise_kind),
            b.role,
            b.index,
        ))
    });
    Ok(SweepReport {
        config: cfg.clone(),
        schedule: sched,
        n_train: n,
        n_test: data.test.n(),
        preprocess: data.stats,
        accounting,
        rows,
        runs,
    })
}

fn noise_rank(cfg: &ExperimentConfig, kind: &str) -> usize {
    cfg.noise.iter().position(|n| n.kind() == kind).unwrap_or(usize::MAX)
}

pub const SWEEP_CSV_HEADER: [&str; 11] = [
    "dimension",
    "noise_kind",
    "lr",
    "mean_acc",
    "std_acc",
    "stderr_acc",
    "eps",
    "delta",
    "seed",
    "repeat_seeds",
    "status",
];

pub fn sweep_csv(report: &SweepReport) -> Result<String> {
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.dimension.to_string(),
                r.noise_kind.clone(),
                fmt9(r.lr),
                fmt9(r.mean_acc),
                fmt9(r.std_acc),
                fmt9(r.stderr_acc),
                fmt9(r.eps),
                fmt9(r.delta),
                r.seed.to_string(),
                r.repeat_seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(";"),
                r.status.clone(),
            ]
        })
        .collect();
    to_csv_string(&SWEEP_CSV_HEADER, &rows)
}

/// Tab-separated plot data, one gnuplot index block per noise kind.
pub fn sweep_tsv(report: &SweepReport) -> String {
    let mut out = String::from("# dimension\tnoise_kind\tmean_acc\tstd_acc\tstderr_acc\n");
    for (b, nc) in report.config.noise.iter().enumerate() {
        if b > 0 {
            out.push_str("\n\n");
        }
        for r in report.rows.iter().filter(|r| r.noise_kind == nc.kind()) {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.dimension,
                r.noise_kind,
                fmt9(r.mean_acc),
                fmt9(r.std_acc),
                fmt9(r.stderr_acc)
            ));
        }
    }
    out
}

pub fn sweep_gnuplot(report: &SweepReport, data_file: &str) -> String {
    let mut s = String::from(
        "set logscale x\nset xlabel \"dimension\"\nset ylabel \"test accuracy\"\nset key bottom left\nplot \\\n",
    );
    let parts: Vec<String> = report
        .config
        .noise
        .iter()
        .enumerate()
        .map(|(i, nc)| {
            format!(
                "  \"{data_file}\" index {i} using 1:3:5 with yerrorlines title \"{}\"",
                nc.kind()
            )
        })
        .collect();
    s.push_str(&parts.join(", \\\n"));
    s.push('\n');
    s
}

/// Writes `sweep.csv`, `sweep.json`, `sweep.tsv` and `sweep.gp` into `dir`.
pub fn write_sweep_outputs(report: &SweepReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let files = [
        ("sweep.csv", sweep_csv(report)?),
        ("sweep.json", to_json_string(report)?),
        ("sweep.tsv", sweep_tsv(report)),
        ("sweep.gp", sweep_gnuplot(report, "sweep.tsv")),
    ];
    let mut out = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        write_file(&path, &text)?;
        out.push(path);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(lr: f64, score: Option<f64>) -> RunRecord {
        RunRecord {
            dimension: 9,
            noise_kind: "none".into(),
            lr,
            role: "select",
            index: 0,
            seed: 0,
            epoch_accuracy: vec![],
            score,
            error: None,
        }
    }

    #[test]
    fn ties_go_to_smaller_rate() {
        let a = rec(0.5, Some(0.8));
        let b = rec(0.1, Some(0.8));
        let c = rec(5.0, None);
        assert_eq!(select_lr(&[&a, &b, &c]), Some(0.1));
        let d = rec(1.0, Some(0.81));
        assert_eq!(select_lr(&[&a, &b, &d]), Some(1.0));
        assert_eq!(select_lr(&[&c]), None);
    }

    #[test]
    fn schedule_rounds_up() {
        let s = Schedule::new(59535, 250, 10);
        assert_eq!(s.steps_per_epoch, 239);
        assert_eq!(s.iterations, 2390);
        assert_eq!(Schedule::new(10, 50, 3).batch(), BatchSpec::Full);
    }

    #[test]
    fn derived_seeds_differ_by_tag() {
        let a = derive_seed(1, [1, 0, 0]);
        assert_eq!(a, derive_seed(1, [1, 0, 0]));
        assert_ne!(a, derive_seed(1, [1, 0, 1]));
        assert_ne!(a, derive_seed(2, [1, 0, 0]));
    }
}
