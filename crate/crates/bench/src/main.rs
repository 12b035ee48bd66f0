use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dpglm::accountant::{AccountingSummary, Conversion, PrivacyLedger};
use dpglm::clipping::clipped_objective;
use dpglm::diagnostics::{
    blocks_with_logits, clipping_bias_instance, clipping_bias_objective, field_asymmetry, field_jacobian_analytic,
    field_jacobian_fd, fingerprint_dataset, golden_section_minimize, theta_clipped_star_closed_form, ClipMode,
    DEFAULT_FD_STEP, FINGERPRINT_BETA,
};
use dpglm::losses::{LogisticLoss, SoftmaxExample};
use dpglm_bench::config::{full_pads, load_toml};
use dpglm_bench::rank::write_rank_outputs;
use dpglm_bench::report::{fmt9, to_csv_string, to_json_string, write_file};
use dpglm_bench::sweep::write_sweep_outputs;
use dpglm_bench::{run_dimension_sweep, run_rank_scaling, BenchError, ExperimentConfig, RankScalingConfig};
use ndarray::{array, Array1};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "dpglm",
    version,
    about = "Private gradient descent experiments for generalized linear models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Accuracy against padded dimension for each noise kind.
    Bench {
        #[command(flatten)]
        args: ConfigArgs,
        /// Replace `pads` with the full `{1, 2, 5} x 10^i` grid, `i` in `1..=4`.
        #[arg(long)]
        full_grid: bool,
    },
    /// Privacy of a run configuration.
    Account(AccountArgs),
    /// Generate diagnostic instances.
    #[command(subcommand)]
    Gen(GenCommand),
    /// Numerical checks.
    #[command(subcommand)]
    Check(CheckCommand),
    /// Excess risk against ambient dimension and feature rank.
    RankSweep(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `threads` from the config.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mechanism {
    Gaussian,
    Gamma,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConversionArg {
    Improved,
    Classic,
}

#[derive(Args)]
struct AccountArgs {
    #[arg(long, value_enum, default_value = "gaussian")]
    mechanism: Mechanism,
    /// Poisson sampling rate; 1 means full batch.
    #[arg(long)]
    q: f64,
    /// Gaussian noise multiplier.
    #[arg(long)]
    noise_multiplier: Option<f64>,
    /// Gamma privacy parameter in units of the sensitivity.
    #[arg(long)]
    eps0: Option<f64>,
    #[arg(long, conflicts_with = "epochs")]
    steps: Option<usize>,
    /// Number of steps is `ceil(epochs / q)`.
    #[arg(long)]
    epochs: Option<f64>,
    #[arg(long, default_value_t = 1e-5)]
    delta: f64,
    #[arg(long, value_enum, default_value = "improved")]
    conversion: ConversionArg,
}

#[derive(Subcommand)]
enum GenCommand {
    /// Fingerprinting instance as CSV (`y,x_1..x_d`).
    Fingerprint {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = FINGERPRINT_BETA)]
        beta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Clipped minimizer and excess loss on the clipping-bias instance.
    Clipbias {
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.05, 0.1, 0.2, 0.4])]
        clip: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Joint,
    PerClass,
}

#[derive(Subcommand)]
enum CheckCommand {
    /// Jacobian asymmetry of the clipped softmax gradient field.
    Field {
        /// Class logits at the test point; the blocks are multiples of `x`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = vec![0.0, 1.0, 0.5])]
        logits: Vec<f64>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = vec![0.8, 0.6])]
        x: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        label: usize,
        #[arg(long)]
        clip: f64,
        #[arg(long, value_enum, default_value = "joint")]
        mode: ModeArg,
        #[arg(long, default_value_t = DEFAULT_FD_STEP)]
        h: f64,
    },
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<(), BenchError> {
    match out {
        Some(path) => write_file(path, text),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|source| BenchError::Io {
                path: "<stdout>".into(),
                source,
            }),
    }
}

fn bench(args: ConfigArgs, full_grid: bool) -> Result<(), BenchError> {
    let mut cfg: ExperimentConfig = load_toml(&args.config)?;
    if full_grid {
        cfg.pads = full_pads();
    }
    if let Some(out) = args.out {
        cfg.output_dir = out;
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    let report = run_dimension_sweep(&cfg)?;
    for path in write_sweep_outputs(&report, &cfg.output_dir)? {
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn rank_sweep(args: ConfigArgs) -> Result<(), BenchError> {
    let mut cfg: RankScalingConfig = load_toml(&args.config)?;
    if let Some(out) = args.out {
        cfg.output_dir = out;
    }
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    let report = run_rank_scaling(&cfg)?;
    for path in write_rank_outputs(&report, &cfg.output_dir)? {
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn account(a: AccountArgs) -> Result<(), BenchError> {
    let steps = match (a.steps, a.epochs) {
        (Some(s), _) => s,
        (None, Some(e)) => (e / a.q).ceil() as usize,
        (None, None) => return Err(BenchError::Config("give --steps or --epochs".into())),
    };
    let conversion = match a.conversion {
        ConversionArg::Improved => Conversion::Improved,
        ConversionArg::Classic => Conversion::Classic,
    };
    let mut ledger = PrivacyLedger::with_default_orders().with_conversion(conversion);
    match a.mechanism {
        Mechanism::Gaussian => {
            let z = a
                .noise_multiplier
                .ok_or_else(|| BenchError::Config("--noise-multiplier is required".into()))?;
            ledger.compose_subsampled_gaussian(a.q, z, steps)?;
        }
        Mechanism::Gamma => {
            let eps0 = a.eps0.ok_or_else(|| BenchError::Config("--eps0 is required".into()))?;
            if a.q < 1.0 {
                ledger.compose_subsampled_gamma(eps0, a.q, steps)?;
            } else {
                ledger.compose_pure(eps0, steps)?;
            }
        }
    }
    let summary = AccountingSummary::from_ledger(&ledger, a.delta)?;
    emit(None, &to_json_string(&summary)?)
}

fn gen_fingerprint(
    d: usize,
    n: usize,
    alpha: f64,
    beta: f64,
    seed: u64,
    out: Option<&PathBuf>,
) -> Result<(), BenchError> {
    let inst = fingerprint_dataset::<f64>(d, n, alpha, beta, seed)?;
    inst.check_invariants()?;
    let mut header = vec!["y".to_string()];
    header.extend((1..=d).map(|j| format!("x_{j}")));
    let rows: Vec<Vec<String>> = (0..n)
        .map(|i| {
            let mut row = vec![fmt9(inst.dataset.response(i))];
            row.extend(inst.dataset.row(i).iter().map(|&v| fmt9(v)));
            row
        })
        .collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    emit(out, &to_csv_string(&header_refs, &rows)?)
}

fn gen_clipbias(clips: &[f64], out: Option<&PathBuf>) -> Result<(), BenchError> {
    let data = clipping_bias_instance::<f64>(1)?;
    let mut rows = Vec::new();
    for &b in clips {
        let closed = theta_clipped_star_closed_form(b)?;
        let numeric = golden_section_minimize(
            |t| clipped_objective(&LogisticLoss, &data, array![t].view(), b).unwrap_or(f64::INFINITY),
            -5.0,
            40.0,
            1e-10,
        );
        let excess = clipping_bias_objective(closed) - clipping_bias_objective(0.0);
        rows.push(vec![fmt9(b), fmt9(closed), fmt9(numeric), fmt9(excess)]);
    }
    emit(
        out,
        &to_csv_string(
            &["clip_norm", "theta_closed_form", "theta_numeric", "excess_loss"],
            &rows,
        )?,
    )
}

#[derive(Serialize)]
struct FieldReport {
    mode: &'static str,
    clip_norm: f64,
    h: f64,
    asymmetry: f64,
    analytic_asymmetry: f64,
    max_fd_analytic_gap: f64,
}

fn check_field(logits: &[f64], x: &[f64], label: usize, clip: f64, mode: ModeArg, h: f64) -> Result<(), BenchError> {
    let x = Array1::from(x.to_vec());
    let ex = SoftmaxExample::new(x.clone(), label, logits.len())?;
    let blocks = blocks_with_logits(&x, logits)?;
    let (mode, name) = match mode {
        ModeArg::Joint => (ClipMode::Joint, "joint"),
        ModeArg::PerClass => (ClipMode::PerClass, "per_class"),
    };
    let asym = field_asymmetry(blocks.view(), &ex, clip, mode, h)?;
    let fd = field_jacobian_fd(blocks.view(), &ex, clip, mode, h)?;
    let an = field_jacobian_analytic(blocks.view(), &ex, clip, mode)?;
    let gap = (&fd - &an).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let report = FieldReport {
        mode: name,
        clip_norm: clip,
        h,
        asymmetry: asym,
        analytic_asymmetry: dpglm::diagnostics::asymmetry(&an),
        max_fd_analytic_gap: gap,
    };
    emit(None, &to_json_string(&report)?)
}

fn run(cli: Cli) -> Result<(), BenchError> {
    match cli.command {
        Command::Bench { args, full_grid } => bench(args, full_grid),
        Command::RankSweep(a) => rank_sweep(a),
        Command::Account(a) => account(a),
        Command::Gen(GenCommand::Fingerprint {
            d,
            n,
            alpha,
            beta,
            seed,
            out,
        }) => gen_fingerprint(d, n, alpha, beta, seed, out.as_ref()),
        Command::Gen(GenCommand::Clipbias { clip, out }) => gen_clipbias(&clip, out.as_ref()),
        Command::Check(CheckCommand::Field {
            logits,
            x,
            label,
            clip,
            mode,
            h,
        }) => check_field(&logits, &x, label, clip, mode, h),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
