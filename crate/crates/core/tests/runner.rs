//! End-to-end checks of the runner and the `homogenize-lab` binary.

use std::path::Path;
use std::process::{Command, Output};

use homogenize_lab::runner::{self, ExperimentConfig, RunOptions};

const BIN: &str = env!("CARGO_BIN_EXE_homogenize-lab");

fn small_linear(n_paths: usize, seed: u64) -> String {
    format!(
        r#"{{
  "experiment": "linear",
  "measure": {{"preset": "shear", "kappa": 1.0, "sigma": 1.0, "alpha": 1.0}},
  "u0": {{"center": [0.0, 0.0], "radius": 2.0}},
  "T": 1.0,
  "x": [0.3, 0.2],
  "epsilons": [0.5, 0.25],
  "n_paths": {n_paths},
  "seed": {seed},
  "numerics": {{"gk_paths": 100, "bootstrap": 100}}
}}"#
    )
}

fn write_config(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn lab(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("terminated by signal")
}

fn read(dir: &Path, file: &str) -> String {
    std::fs::read_to_string(dir.join(file)).unwrap_or_else(|e| panic!("{file}: {e}"))
}

fn sample_column(csv: &str) -> Vec<f64> {
    csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect()
}

#[test]
fn validate_accepts_shipped_configs() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let p = entry.unwrap().path();
        let o = lab(&["validate", p.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}: {}", p.display(), String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).starts_with("ok: "));
        seen += 1;
    }
    assert!(seen >= 8);
}

#[test]
fn validation_failures_exit_2_with_field_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        ("increasing.json", small_linear(200, 1).replace("[0.5, 0.25]", "[0.25, 0.5]"), "epsilons"),
        ("few_paths.json", small_linear(20, 1), "n_paths"),
        ("with_f.json", small_linear(200, 1).replace("\"T\"", "\"f\": \"demo-mean\", \"T\""), "f"),
        ("typo.json", small_linear(200, 1).replace("\"seed\"", "\"sead\""), "sead"),
        ("syntax.json", "{ \"experiment\": ".to_string(), "error"),
    ];
    for (name, text, needle) in cases {
        let p = write_config(tmp.path(), name, &text);
        let o = lab(&["validate", p.to_str().unwrap()]);
        assert_eq!(code(&o), 2, "{name}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains(needle), "{name}: {err}");
    }
}

#[test]
fn two_point_rejects_coincident_points() {
    let text = small_linear(200, 1)
        .replace("\"linear\"", "\"two-point\"")
        .replace("\"epsilons\"", "\"x2\": [0.3, 0.2], \"epsilons\"");
    let err = ExperimentConfig::from_json(&text).unwrap().validate().unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("x2"));
}

#[test]
fn missing_config_exits_4() {
    let o = lab(&["validate", "/nonexistent/config.json"]);
    assert_eq!(code(&o), 4);
    let o = lab(&["run", "/nonexistent/config.json"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn unwritable_output_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &small_linear(100, 1));
    let blocker = write_config(tmp.path(), "file", "x");
    let out = blocker.join("sub");
    let o = lab(&["run", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", "1"]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn run_writes_outputs_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &small_linear(100, 1));
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for (dir, seed) in [(&a, "9"), (&b, "9"), (&c, "10")] {
        let o = lab(&["run", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap(), "--threads", "2", "--seed", seed]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["metrics.csv", "samples_0.5.csv", "samples_0.25.csv", "samples_limit.csv", "coefficients.json"] {
        assert_eq!(read(&a, f), read(&b, f), "{f}");
    }
    assert_ne!(read(&a, "samples_0.5.csv"), read(&c, "samples_0.5.csv"));

    let metrics = read(&a, "metrics.csv");
    assert!(metrics.starts_with("epsilon,metric,value,ci_lo,ci_hi,n\n"));
    for row in ["0.5,ks,", "0.25,ks,", "limit,ks,", "ladder,ks_monotone,"] {
        assert!(metrics.contains(row), "missing {row}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&read(&a, "manifest.json")).unwrap();
    assert_eq!(manifest["master_seed"], 9);
    assert_eq!(manifest["config"]["seed"], 9);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn coefficients_command_writes_json() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &small_linear(100, 3));
    let out = tmp.path().join("coef");
    let o = lab(&["coefficients", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--threads", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let json: serde_json::Value = serde_json::from_str(&read(&out, "coefficients.json")).unwrap();
    assert!(json.is_object());
    assert!(read(&out, "metrics.csv").contains("gk,A_22,"));
}

#[test]
fn growing_n_paths_keeps_the_prefix() {
    let small = ExperimentConfig::from_json(&small_linear(100, 5)).unwrap();
    let large = ExperimentConfig::from_json(&small_linear(160, 5)).unwrap();
    let a = runner::execute(&small, Some(1)).unwrap();
    let b = runner::execute(&large, Some(1)).unwrap();
    for label in ["0.5", "0.25", "limit"] {
        let (x, y) = (a.samples(label).unwrap(), b.samples(label).unwrap());
        assert_eq!(x.len(), 100);
        assert_eq!(y.len(), 160);
        assert_eq!(x, &y[..100], "{label}");
    }
}

#[test]
fn zero_nonlinearity_reproduces_linear_samples() {
    let linear = ExperimentConfig::from_json(&small_linear(100, 6)).unwrap();
    let text = small_linear(100, 6)
        .replace("\"linear\"", "\"semilinear-zero\"")
        .replace("\"T\"", "\"f\": \"zero\", \"T\"");
    let zero = ExperimentConfig::from_json(&text).unwrap();
    let a = runner::execute(&linear, Some(1)).unwrap();
    let b = runner::execute(&zero, Some(1)).unwrap();
    for label in ["0.5", "0.25"] {
        let (x, y) = (a.samples(label).unwrap(), b.samples(label).unwrap());
        assert_eq!(x.len(), y.len());
        for (p, q) in x.iter().zip(y) {
            assert!((p - q).abs() < 1e-12, "{label}: {p} vs {q}");
        }
    }
}

#[test]
fn seed_override_and_sample_csv_shape() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_json(&small_linear(100, 1)).unwrap();
    let opts = RunOptions { out_dir: Some(tmp.path().join("o")), threads: Some(1), seed: Some(77) };
    let report = runner::run(&cfg, &opts).unwrap();
    let csv = read(&report.out_dir, "samples_0.25.csv");
    assert!(csv.starts_with("path_id,U_t\n"));
    let vals = sample_column(&csv);
    assert_eq!(vals.len(), 100);
    assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(runner::run(&cfg, &RunOptions { threads: Some(0), ..opts }).unwrap_err().exit_code() == 2);
}
