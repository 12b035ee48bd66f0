use std::io::Write;

use dpglm::glm::GlmDataset;
use dpglm::subspace::{feature_projector, DEFAULT_REL_TOL};
use dpglm_bench::config::{from_toml_str, NoiseConfig};
use dpglm_bench::data::{
    accuracy, load_sparse_dataset, pad_dimensions, parse_sparse, planted_rank_logistic, preprocess, PlantedRankSpec,
    PreprocessStats, DATA_DIR_ENV,
};
use dpglm_bench::sweep::{run_dimension_sweep, sweep_csv};
use dpglm_bench::{run_rank_scaling, ExperimentConfig, RankScalingConfig};
use ndarray::{array, Array1, Array2};
use proptest::prelude::*;

fn dataset(rows: Vec<Vec<f64>>) -> GlmDataset<f64> {
    let n = rows.len();
    let p = rows[0].len();
    let x = Array2::from_shape_vec((n, p), rows.into_iter().flatten().collect()).unwrap();
    GlmDataset::new(x, Array1::from_elem(n, 1.0)).unwrap()
}

#[test]
fn preprocessing_uses_train_statistics_only() {
    let train = dataset(vec![vec![0.0, 5.0, 2.0], vec![4.0, 5.0, -2.0], vec![2.0, 5.0, 0.0]]);
    let test = dataset(vec![vec![8.0, 1.0, 0.0]]);
    let (tr, te, stats) = preprocess(&train, &test).unwrap();
    assert_eq!(stats, PreprocessStats::fit(&train));
    assert_eq!(tr.dim(), 4);
    // the constant column maps to 0 on train and test alike
    assert!(tr.features().column(1).iter().all(|&v| v == 0.0));
    assert_eq!(te.features()[[0, 1]], 0.0);
    // midpoint of the train range maps to 0
    assert_eq!(tr.features().row(2).to_vec(), vec![0.0, 0.0, 0.0, 1.0 / 3.0]);
    // test values outside the train range are scaled, then projected
    let row = te.features().row(0);
    let head = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
    assert!((head - (8.0f64 / 9.0).sqrt()).abs() < 1e-12);
    assert_eq!(stats.apply(&test).unwrap(), te);
}

#[test]
fn preprocessing_rejects_dimension_mismatch() {
    let train = dataset(vec![vec![0.0, 1.0]]);
    let test = dataset(vec![vec![0.0, 1.0, 2.0]]);
    assert!(preprocess(&train, &test).is_err());
    assert!(PreprocessStats::fit(&train).apply(&test).is_err());
}

proptest! {
    #[test]
    fn preprocessed_rows_lie_in_unit_ball(
        vals in prop::collection::vec(-1e3f64..1e3, 12..60),
        extra in prop::collection::vec(-1e4f64..1e4, 4),
    ) {
        let p = 4;
        let n = vals.len() / p;
        let train = GlmDataset::new(
            Array2::from_shape_vec((n, p), vals[..n * p].to_vec()).unwrap(),
            Array1::from_elem(n, 1.0),
        ).unwrap();
        let test = GlmDataset::new(Array2::from_shape_vec((1, p), extra).unwrap(), array![1.0]).unwrap();
        let (tr, te, _) = preprocess(&train, &test).unwrap();
        for d in [&tr, &te] {
            for i in 0..d.n() {
                prop_assert!(d.row_norm(i) <= 1.0 + 1e-9);
                prop_assert_eq!(d.row(i)[p], 1.0 / 3.0);
            }
        }
    }
}

#[test]
fn padding_keeps_norms_labels_and_rank() {
    let spec = PlantedRankSpec {
        n_train: 60,
        n_test: 10,
        dim: 12,
        rank: 4,
        signal: 3.0,
        offset: 0.0,
        seed: 9,
    };
    let (train, _) = planted_rank_logistic(&spec).unwrap();
    let padded = pad_dimensions(&train, 5000).unwrap();
    assert_eq!(padded.dim(), 5000);
    assert_eq!(padded.responses(), train.responses());
    assert_eq!(padded.row_norms(), train.row_norms());
    let r0 = feature_projector(&train, DEFAULT_REL_TOL).unwrap().rank();
    let r1 = feature_projector(&padded, DEFAULT_REL_TOL).unwrap().rank();
    assert_eq!((r0, r1), (4, 4));
    assert!(pad_dimensions(&train, 5).is_err());
    let theta = Array1::from_shape_fn(5000, |j| if j < 12 { (j as f64).sin() } else { 7.0 });
    let short = theta.slice(ndarray::s![..12]).to_owned();
    assert_eq!(accuracy(&padded, &theta).unwrap(), accuracy(&train, &short).unwrap());
}

#[test]
fn sparse_parser_reports_line_numbers() {
    let d = parse_sparse("# header\n+1 2:1.5\n\n-1 1:2 3:0.25 # note\n".as_bytes(), "mem").unwrap();
    assert_eq!(d.n(), 2);
    assert_eq!(d.features().row(1).to_vec(), vec![2.0, 0.0, 0.25]);
    assert_eq!(d.responses().to_vec(), vec![1.0, -1.0]);
    for (text, line) in [
        ("1 1:2\n1 0:3\n", 2),
        ("1 1:x\n", 1),
        ("1 2:1 2:3\n", 1),
        ("y 1:1\n", 1),
    ] {
        let msg = parse_sparse(text.as_bytes(), "mem").unwrap_err().to_string();
        assert!(msg.contains(&format!("mem:{line}")), "{text:?}: {msg}");
    }
    assert!(parse_sparse("\n# nothing\n".as_bytes(), "mem").is_err());
}

#[test]
fn relative_paths_resolve_against_data_dir() {
    let dir = tempfile::tempdir().unwrap();
    let mut f = std::fs::File::create(dir.path().join("tiny.svm")).unwrap();
    writeln!(f, "1 1:0.5\n-1 2:1").unwrap();
    std::env::set_var(DATA_DIR_ENV, dir.path());
    let d = load_sparse_dataset(std::path::Path::new("tiny.svm")).unwrap();
    assert_eq!((d.n(), d.dim()), (2, 2));
    assert!(load_sparse_dataset(std::path::Path::new("absent.svm")).is_err());
}

const SMALL_SWEEP: &str = r#"
seed = 17
repeats = 2
pads = [9, 40, 400]
learning_rates = [0.5, 2.0]
[data]
kind = "synthetic"
n_train = 400
n_test = 200
dim = 8
rank = 4
signal = 6.0
seed = 3
[optimizer]
batch_size = 40
epochs = 3
select_last_epochs = 2
[[noise]]
kind = "none"
[[noise]]
kind = "gaussian"
noise_multiplier = 1.0
"#;

#[test]
fn padding_never_changes_noiseless_or_gaussian_accuracy() {
    let cfg: ExperimentConfig = from_toml_str(SMALL_SWEEP).unwrap();
    let report = run_dimension_sweep(&cfg).unwrap();
    for kind in ["none", "gaussian"] {
        let rows: Vec<_> = report.rows.iter().filter(|r| r.noise_kind == kind).collect();
        assert_eq!(rows.len(), 3);
        for r in &rows {
            assert_eq!(r.status, "ok");
            assert_eq!(r.mean_acc, rows[0].mean_acc, "{kind} at {}", r.dimension);
            assert_eq!(r.lr, rows[0].lr);
        }
    }
    let none = report.rows.iter().find(|r| r.noise_kind == "none").unwrap();
    assert!(none.eps.is_infinite());
    assert!(report.rows.iter().all(|r| r.mean_acc > 0.6));
    assert!(sweep_csv(&report).unwrap().starts_with("dimension,noise_kind,lr,"));
}

#[test]
fn gamma_rows_are_accounted_as_pure_then_converted() {
    let mut cfg: ExperimentConfig = from_toml_str(SMALL_SWEEP).unwrap();
    cfg.noise = vec![NoiseConfig::Gamma { scale: 0.57 }];
    cfg.pads = vec![9];
    let report = run_dimension_sweep(&cfg).unwrap();
    let acct = &report.accounting[0].summary;
    assert!(acct.eps.is_finite() && acct.eps > 0.0);
    assert_eq!(report.rows[0].eps, acct.eps);
}

#[test]
fn noiseless_rank_runs_reach_the_oracle() {
    let cfg: RankScalingConfig = from_toml_str(
        r#"
        seed = 4
        n = 200
        signal = 4.0
        fixed_rank = 5
        dims = [10, 100, 1000]
        fixed_dim = 1000
        ranks = [2, 8, 32]
        seeds = 2
        eps = 1.0
        iterations = 3000
        learning_rate = 4.0
        output = "last_iterate"
        oracle_iterations = 3000
        oracle_learning_rate = 4.0
        private = false
        "#,
    )
    .unwrap();
    let report = run_rank_scaling(&cfg).unwrap();
    assert_eq!(report.cells.len(), 6);
    for c in &report.cells {
        assert_eq!(c.status, "ok");
        assert!(c.excess.iter().all(|e| e.abs() < 1e-4), "{:?}", c);
        assert_eq!(c.sigma, 0.0);
    }
}
