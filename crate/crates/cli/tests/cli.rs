use std::path::Path;
use std::process::{Command, Output};

fn granmpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_granmpc")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn build_sets_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sets");
    let o = granmpc(&["build-sets", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let sets: serde_json::Value = serde_json::from_str(&read(&out.join("sets.json"))).unwrap();
    let input = sets["tightened"]["input"].as_f64().unwrap();
    assert!(input > 0.0 && input < 3.0);
    let lane = sets["tightened"]["lane"].as_array().unwrap();
    assert!(lane[0].as_f64().unwrap() > -0.5 && lane[1].as_f64().unwrap() < 2.5);
    assert!(sets["tube"]["z"].is_object());
    let cov: serde_json::Value = serde_json::from_str(&read(&out.join("covariance.json"))).unwrap();
    assert_eq!(cov["sigmas"].as_array().unwrap().len(), 21);
    assert!(out.join("tube.json").exists());
    assert!(out.join("config.toml").exists());
    assert!(String::from_utf8_lossy(&o.stdout).contains("tightened"));
}

#[test]
fn zero_runs_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = granmpc(&["run", "--method", "granular", "--runs", "0", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bad_arguments_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&granmpc(&["run", "--set", "scenario.nope=1", "--out", out])), 2);
    assert_eq!(code(&granmpc(&["run", "--set", "chance.p=1.5", "--out", out])), 2);
    assert_eq!(code(&granmpc(&["run", "--method", "fast", "--out", out])), 2);
    assert_eq!(code(&granmpc(&["run", "--config", "/nonexistent/cfg.toml", "--out", out])), 2);
    assert_eq!(code(&granmpc(&["teleport"])), 2);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[scenario]\nwarp = 9\n").unwrap();
    assert_eq!(code(&granmpc(&["build-sets", "--config", bad.to_str().unwrap(), "--out", out])), 2);
}

#[test]
fn runtime_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "").unwrap();
    let o = granmpc(&["build-sets", "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(!o.stderr.is_empty());
}

#[test]
fn run_writes_trajectory_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("nested/run");
    let o = granmpc(&[
        "run",
        "--method",
        "granular",
        "--seed",
        "3",
        "--terminal-cost",
        "origin",
        "--set",
        "scenario.max_steps=5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let traj = read(&out.join("granular_3.jsonl"));
    assert_eq!(traj.lines().count(), 6);
    assert!(!traj.contains("\"trace\""));
    let cfg = read(&out.join("config.toml"));
    assert!(cfg.contains("seed = 3"));
    assert!(cfg.contains("terminal_cost = \"origin\""));
    assert!(cfg.contains("max_steps = 5"));
    assert_eq!(read(&out.join("summary.csv")).lines().count(), 2);
}

#[test]
fn debug_trace_records_iterates() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = granmpc(&["run", "--debug-trace", "--set", "scenario.max_steps=2", "--out", out]);
    assert_eq!(code(&o), 0);
    let traj = read(&dir.path().join("granular_1.jsonl"));
    let first: serde_json::Value = serde_json::from_str(traj.lines().next().unwrap()).unwrap();
    assert!(!first["trace"].as_array().unwrap().is_empty());
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    let o = granmpc(&["build-sets", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let text = read(&dir.path().join("config.toml"))
        .replace("seed = 1", "seed = 9")
        .replace("max_steps = 100", "max_steps = 3");
    std::fs::write(&cfg, text).unwrap();
    let out = dir.path().join("a");
    let o = granmpc(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("granular_9.jsonl").exists());
    let out = dir.path().join("b");
    let o = granmpc(&[
        "run",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "4",
        "--set",
        "run.seed=6",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert!(out.join("granular_4.jsonl").exists());
}

#[test]
fn montecarlo_writes_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let o = granmpc(&[
        "montecarlo",
        "--method",
        "granular",
        "--runs",
        "2",
        "--seed",
        "7",
        "--jobs",
        "2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(&out.join("summary.csv"));
    assert!(csv.starts_with("method,run_id,passed,collided,reached,steps,cumulative_cost,mean_solve_ms,softened_steps"));
    assert_eq!(csv.lines().count(), 3);
    let agg = read(&out.join("aggregate.csv"));
    let header: Vec<&str> = agg.lines().next().unwrap().split(',').collect();
    let row: Vec<&str> = agg.lines().nth(1).unwrap().split(',').collect();
    let pass = header.iter().position(|h| *h == "pass_rate").unwrap();
    assert_eq!(row[pass].parse::<f64>().unwrap(), 1.0);
    assert!(out.join("runs/granular_7.jsonl").exists());
    assert!(out.join("runs/granular_8.jsonl").exists());
    let summary: serde_json::Value = serde_json::from_str(&read(&out.join("summary.json"))).unwrap();
    assert_eq!(summary["n_runs"], 2);
}

#[test]
fn compare_reports_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let o = granmpc(&["compare", "--runs", "1", "--set", "scenario.max_steps=10", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&read(&out.join("comparison.json"))).unwrap();
    assert!(report["time_ratio"].as_f64().unwrap() > 0.0);
    assert!(report["cost_ratio"].as_f64().unwrap() > 0.0);
    assert_eq!(report["summaries"].as_array().unwrap().len(), 3);
    assert_eq!(read(&out.join("aggregate.csv")).lines().count(), 4);
    let curves = read(&out.join("curves.csv"));
    assert_eq!(curves.lines().count(), 11);
    assert!(curves.starts_with("k,cost_granular,solve_ms_granular"));
    for m in ["granular", "single-rsmpc", "single-rmpc"] {
        assert!(out.join(format!("summary_{m}.csv")).exists());
    }
}

#[test]
fn partial_config_file_keeps_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "[chance]\np = 0.9\n").unwrap();
    let o = granmpc(&["build-sets", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let echoed = read(&dir.path().join("config.toml"));
    assert!(echoed.contains("p = 0.9"));
    assert!(echoed.contains("dt = 0.2"));
}
