use std::path::Path;
use std::process::{Command, Output};

fn dpglm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpglm")).args(args).output().unwrap()
}

fn stdout(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn account_prints_the_reference_budget() {
    let q = format!("{}", 250.0 / 59535.0);
    let text = stdout(&dpglm(&[
        "account",
        "--q",
        &q,
        "--noise-multiplier",
        "0.63",
        "--epochs",
        "10",
    ]));
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["steps"], 2382);
    let eps = v["eps"].as_f64().unwrap();
    assert!((4.5..=5.5).contains(&eps), "{eps}");
    let gamma = stdout(&dpglm(&[
        "account",
        "--mechanism",
        "gamma",
        "--q",
        &q,
        "--eps0",
        "1.754386",
        "--epochs",
        "10",
    ]));
    let g: serde_json::Value = serde_json::from_str(&gamma).unwrap();
    assert!((4.5..=5.7).contains(&g["eps"].as_f64().unwrap()));
}

#[test]
fn account_requires_its_mechanism_parameter() {
    let out = dpglm(&["account", "--q", "0.1", "--steps", "5"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--noise-multiplier"));
}

#[test]
fn clipbias_table_matches_closed_form() {
    let text = stdout(&dpglm(&["gen", "clipbias", "--clip", "0.1"]));
    let mut lines = text.split("\r\n");
    assert_eq!(
        lines.next(),
        Some("clip_norm,theta_closed_form,theta_numeric,excess_loss")
    );
    let cells: Vec<f64> = lines.next().unwrap().split(',').map(|c| c.parse().unwrap()).collect();
    assert!((cells[1] - 2.0 * 9f64.ln()).abs() < 1e-8);
    assert!((cells[2] - cells[1]).abs() < 1e-6);
    assert!((cells[3] - 0.846).abs() < 0.01);
}

#[test]
fn fingerprint_csv_is_written_to_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fp/inst.csv");
    let p = path.to_str().unwrap();
    stdout(&dpglm(&[
        "gen",
        "fingerprint",
        "--d",
        "4",
        "--n",
        "30",
        "--seed",
        "2",
        "--out",
        p,
    ]));
    let text = std::fs::read_to_string(&path).unwrap();
    let rows: Vec<&str> = text.trim_end().split("\r\n").collect();
    assert_eq!(rows[0], "y,x_1,x_2,x_3,x_4");
    assert_eq!(rows.len(), 31);
    for row in &rows[1..] {
        let v: Vec<f64> = row.split(',').map(|c| c.parse().unwrap()).collect();
        assert!(v[0] == 0.0 || v[0] == 1.0);
        assert!(v[1..].iter().filter(|&&x| x != 0.0).count() <= 1);
    }
}

#[test]
fn field_check_flags_active_clipping_only() {
    let active: serde_json::Value =
        serde_json::from_str(&stdout(&dpglm(&["check", "field", "--clip", "0.3"]))).unwrap();
    assert!(active["asymmetry"].as_f64().unwrap() > 0.01);
    assert!(active["max_fd_analytic_gap"].as_f64().unwrap() < 1e-4);
    let text = stdout(&dpglm(&[
        "check",
        "field",
        "--clip",
        "10",
        "--mode",
        "per-class",
        "--logits=0,-1,0.5",
    ]));
    let inactive: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(inactive["asymmetry"].as_f64().unwrap() <= 1e-5);
    assert_eq!(inactive["mode"], "per_class");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\nrepeats = 1\ncolour = \"red\"\n").unwrap();
    let out = dpglm(&["bench", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

#[test]
fn bench_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.toml");
    std::fs::write(
        &cfg,
        r#"
seed = 5
repeats = 1
pads = [9, 50]
learning_rates = [1.0]
[data]
kind = "synthetic"
n_train = 200
n_test = 100
dim = 8
rank = 8
signal = 5.0
seed = 1
[optimizer]
batch_size = 20
epochs = 2
select_last_epochs = 1
[[noise]]
kind = "gaussian"
noise_multiplier = 1.0
"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = dpglm(&[
        "bench",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--threads",
        "1",
    ]);
    stdout(&out);
    for name in ["sweep.csv", "sweep.json", "sweep.tsv", "sweep.gp"] {
        assert!(!read(&out_dir, name).is_empty(), "{name}");
    }
    let json: serde_json::Value = serde_json::from_slice(&read(&out_dir, "sweep.json")).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 2);
    assert!(String::from_utf8(read(&out_dir, "sweep.gp"))
        .unwrap()
        .contains("sweep.tsv"));
}
