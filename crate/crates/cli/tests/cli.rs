use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command as Process, Output};

use dlnlab::{Command, ExperimentConfig};
use tempfile::TempDir;

fn dlnlab(args: &[&str]) -> Output {
    Process::new(env!("CARGO_BIN_EXE_dlnlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn small(name: &str) -> ExperimentConfig {
    ExperimentConfig {
        name: name.into(),
        dims: vec![4, 4, 4],
        singular_values: vec![1.0, 0.5],
        horizon: 0.5,
        record_every: 20,
        ..ExperimentConfig::default()
    }
}

fn save(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join(format!("{}.json", cfg.name));
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_hashed_log_and_summary() {
    let tmp = TempDir::new().unwrap();
    let cfg = small("t");
    let path = save(tmp.path(), &cfg);
    let out = tmp.path().join("run");
    let res = dlnlab(&["train", "--config", s(&path), "--out", s(&out), "--dump-covariance"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let csv = fs::read_to_string(out.join("run.csv")).unwrap();
    let first = csv.lines().next().unwrap();
    assert_eq!(first, format!("# config_hash: {}", cfg.hash()));
    assert!(csv.lines().nth(1).unwrap().starts_with("time,loss,w_0,w_1"));

    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config_hash"], cfg.hash());
    assert_eq!(summary["seeds"]["run"], cfg.run_seed);
    assert!(out.join("covariance.csv").exists());
    let echoed = ExperimentConfig::load(&out.join("config.json")).unwrap();
    assert_eq!(echoed, cfg);
}

#[test]
fn zero_horizon_gives_header_only_log() {
    let tmp = TempDir::new().unwrap();
    let path = save(tmp.path(), &ExperimentConfig { horizon: 0.0, ..small("z") });
    let out = tmp.path().join("run");
    assert!(dlnlab(&["train", "--config", s(&path), "--out", s(&out)]).status.success());
    let csv = fs::read_to_string(out.join("run.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}

#[test]
fn identical_configs_give_identical_bytes() {
    let tmp = TempDir::new().unwrap();
    let path = save(tmp.path(), &small("r"));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(dlnlab(&["train", "--config", s(&path), "--out", s(&a)]).status.success());
    assert!(dlnlab(&["train", "--config", s(&path), "--out", s(&b)]).status.success());
    assert_eq!(fs::read(a.join("run.csv")).unwrap(), fs::read(b.join("run.csv")).unwrap());

    let c = tmp.path().join("c");
    assert!(dlnlab(&["train", "--config", s(&path), "--out", s(&c), "--seed", "99"]).status.success());
    assert_ne!(fs::read(a.join("run.csv")).unwrap(), fs::read(c.join("run.csv")).unwrap());
}

#[test]
fn single_trajectory_ensemble_is_train() {
    let tmp = TempDir::new().unwrap();
    let path = save(tmp.path(), &small("e"));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(dlnlab(&["train", "--config", s(&path), "--out", s(&a)]).status.success());
    assert!(dlnlab(&["ensemble", "--config", s(&path), "--out", s(&b), "--n-traj", "1"]).status.success());
    assert_eq!(fs::read(a.join("run.csv")).unwrap(), fs::read(b.join("run.csv")).unwrap());
}

#[test]
fn ensemble_writes_finals_and_histograms() {
    let tmp = TempDir::new().unwrap();
    let path = save(tmp.path(), &small("e"));
    let out = tmp.path().join("ens");
    assert!(dlnlab(&["ensemble", "--config", s(&path), "--out", s(&out), "--n-traj", "6"]).status.success());
    let finals = fs::read_to_string(out.join("finals.csv")).unwrap();
    assert_eq!(finals.lines().nth(1), Some("traj,w_0,w_1"));
    assert_eq!(finals.lines().count(), 2 + 6);
    let hist = fs::read_to_string(out.join("hist_w_0.csv")).unwrap();
    assert!(hist.lines().any(|l| l == "bin_left,bin_right,count"));
    assert!(out.join("ensemble.json").exists());
}

#[test]
fn noiseless_stationary_reports_dirac_collapse() {
    let tmp = TempDir::new().unwrap();
    let path = save(tmp.path(), &ExperimentConfig { command: Command::Stationary, ..small("st") });
    let res = dlnlab(&["stationary", "--config", s(&path), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("Dirac"));
}

#[test]
fn stationary_writes_densities() {
    let tmp = TempDir::new().unwrap();
    let cfg = ExperimentConfig { command: Command::Stationary, sigma_q: 0.3, ..small("st") };
    let path = save(tmp.path(), &cfg);
    let out = tmp.path().join("o");
    assert!(dlnlab(&["stationary", "--config", s(&path), "--out", s(&out)]).status.success());
    let d = fs::read_to_string(out.join("density_w_1.csv")).unwrap();
    assert_eq!(d.lines().nth(1), Some("grid,density"));
    assert_eq!(d.lines().count(), 2 + cfg.stationary_grid);
}

#[test]
fn sweep_needs_three_values() {
    let tmp = TempDir::new().unwrap();
    let path = save(tmp.path(), &small("sw"));
    let out = tmp.path().join("o");
    let res = dlnlab(&["sweep", "--config", s(&path), "--out", s(&out), "--axis", "lr", "--values", "0.01"]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("at least 3"));

    let res = dlnlab(&["sweep", "--config", s(&path), "--out", s(&out), "--axis", "batch", "--values", "1,2,4"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2 + 3);
}

#[test]
fn malformed_configs_exit_one() {
    let tmp = TempDir::new().unwrap();
    let mut json: serde_json::Value = serde_json::from_str(&small("bad").to_json()).unwrap();
    json["surprise"] = 1.into();
    let path = tmp.path().join("bad.json");
    fs::write(&path, json.to_string()).unwrap();
    assert_eq!(dlnlab(&["train", "--config", s(&path)]).status.code(), Some(1));

    let path = save(tmp.path(), &ExperimentConfig { singular_values: vec![1.0; 5], ..small("wide") });
    assert_eq!(dlnlab(&["train", "--config", s(&path)]).status.code(), Some(1));
}

#[test]
fn divergence_exits_three() {
    let tmp = TempDir::new().unwrap();
    let cfg = ExperimentConfig {
        stepper: dlnsde::dynamics::StepperKind::GradientDescent,
        eta: 5.0,
        gamma: 0.01,
        horizon: 1e4,
        record_every: u64::MAX,
        ..small("nan")
    };
    let path = save(tmp.path(), &cfg);
    let res = dlnlab(&["train", "--config", s(&path), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stderr).contains("layer"));
}

#[test]
fn figures_data_runs_every_config() {
    let tmp = TempDir::new().unwrap();
    let configs = tmp.path().join("configs");
    fs::create_dir(&configs).unwrap();
    save(&configs, &small("one"));
    save(&configs, &ExperimentConfig { command: Command::Ensemble, n_traj: 3, ..small("two") });
    let out = tmp.path().join("out");
    let res = dlnlab(&["figures-data", "--config", s(&configs), "--out", s(&out), "--seed", "5"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    let index: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("index.json")).unwrap()).unwrap();
    let names: Vec<&str> = index.as_array().unwrap().iter().map(|e| e["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["one", "two"]);
    assert!(out.join("one/run.csv").exists());
    assert!(out.join("two/finals.csv").exists());
    let staged = ExperimentConfig::load(&out.join("two/config.json")).unwrap();
    assert_eq!(staged.run_seed, 5);
}

#[test]
fn validate_passes_and_reports() {
    let tmp = TempDir::new().unwrap();
    let res = dlnlab(&["validate", "--out", s(tmp.path())]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stdout));
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert!(stdout.lines().all(|l| l.starts_with("PASS")));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("validate.json")).unwrap()).unwrap();
    assert!(report.as_array().unwrap().iter().all(|r| r["passed"] == true));
}
