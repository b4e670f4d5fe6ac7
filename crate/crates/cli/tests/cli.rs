use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn config(extra: &str, alpha: f64) -> String {
    format!(
        r#"{{
  "scenario": "cobb-single",
  "shock": {{"kind": "geometric-brownian", "x0": 1.0, "mu": 0.0, "sigma": 0.3}},
  "fuel": {{"kind": "constant", "theta0": 1.6}},
  "discount": 1.0,
  "firms": [{{"alpha": {alpha}, "y": 0.2}}],
  "grid": {{"t_max": 8.0, "n_steps": 80}},
  "mc": {{"n_paths": 512, "inner_paths": 64, "states": 64, "seed": 5, "taus": [0.0, 1.0]}}{extra}
}}"#
    )
}

fn fuel(args: &[&str], dir: &Path, cfg: &str) -> Output {
    let path = dir.join("scenario.json");
    std::fs::write(&path, cfg).unwrap();
    Command::new(env!("CARGO_BIN_EXE_fuel"))
        .args(args)
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.join("out"))
        .output()
        .unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn minimal_config_writes_policy_profit_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = fuel(&["verify-kkt", "--threads", "1"], dir.path(), &config("", 0.5));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["policy.csv", "profit.json", "kkt.json", "run_metadata.json"] {
        assert!(dir.path().join("out").join(name).exists(), "{name}");
    }
    let report = read_json(&dir.path().join("out/kkt.json"));
    assert_eq!(report["verdict"], Value::Bool(true));
    let meta = read_json(&dir.path().join("out/run_metadata.json"));
    assert_eq!(meta["threads"], 1);
}

#[test]
fn alpha_outside_interval_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = fuel(&["simulate"], dir.path(), &config("", 1.5));
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("firms[0].alpha") && err.contains("(0, 1)"), "{err}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_key_is_a_line_anchored_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("", 0.5).replace("\"discount\"", "\"discont\"");
    let out = fuel(&["simulate"], dir.path(), &cfg);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("scenario.json:5:") && err.contains("discont"), "{err}");
}

#[test]
fn missing_config_exits_2() {
    let out = Command::new(env!("CARGO_BIN_EXE_fuel"))
        .args(["simulate", "--config", "/nonexistent/scenario.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn perturbed_plan_fails_condition_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(",\n  \"perturb\": \"early-overinvestment\"", 0.5);
    let out = fuel(&["verify-kkt"], dir.path(), &cfg);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let report = read_json(&dir.path().join("out/kkt.json"));
    let c2 = report["conditions"].as_array().unwrap().iter().find(|c| c["name"] == "condition-2").unwrap();
    assert_eq!(c2["pass"], Value::Bool(false));
    assert_eq!(report["verdict"], Value::Bool(false));
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("", 0.5);
    let mut seen = Vec::new();
    for threads in ["1", "3"] {
        let out = fuel(&["verify-kkt", "--threads", threads], dir.path(), &cfg);
        assert_eq!(out.status.code(), Some(0));
        let o = dir.path().join("out");
        seen.push((std::fs::read(o.join("kkt.json")).unwrap(), std::fs::read(o.join("profit.json")).unwrap()));
    }
    assert_eq!(seen[0], seen[1]);
}

#[test]
fn seed_flag_and_simulate_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = fuel(&["simulate", "--seed", "9"], dir.path(), &config("", 0.5));
    assert_eq!(out.status.code(), Some(0));
    for name in ["shock.csv", "fuel.csv", "policy.csv", "profit.json"] {
        assert!(dir.path().join("out").join(name).exists(), "{name}");
    }
    assert_eq!(read_json(&dir.path().join("out/run_metadata.json"))["seed"], 9);
}

#[test]
fn solve_dp_writes_value_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(",\n  \"dp\": {\"n_steps\": 40, \"fuel_levels\": 21}", 0.5);
    let out = fuel(&["solve-dp"], dir.path(), &cfg);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let dp = read_json(&dir.path().join("out/dp.json"));
    assert!(dp["value"].as_f64().unwrap() > 0.0);
    let table = std::fs::read_to_string(dir.path().join("out/dp_policy.csv")).unwrap();
    assert!(table.starts_with("step,node,"));
}

#[test]
fn env_thread_count_must_be_positive() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scenario.json");
    std::fs::write(&path, config("", 0.5)).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fuel"))
        .env("FUEL_DEFAULT_THREADS", "zero")
        .args(["simulate", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
