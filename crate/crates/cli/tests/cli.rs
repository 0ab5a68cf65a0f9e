//! End-to-end behaviour of the `alio` executable.

use serde_json::Value;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn alio(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alio")).args(args).output().expect("binary runs")
}

fn stdout_json(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_str(String::from_utf8_lossy(&o.stdout).trim()).unwrap()
}

fn stderr_error(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(text.lines().next().unwrap()).unwrap()
}

fn small_corridor(out: &Path, seed: &str) -> Output {
    alio(&[
        "simulate", "--preset", "corridor", "--length", "50", "--duration", "0.5", "--seed", seed, "--rays", "400",
        "--out", out.to_str().unwrap(),
    ])
}

#[test]
fn simulate_writes_layout_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let first = stdout_json(&small_corridor(&a, "7"));
    let second = stdout_json(&small_corridor(&b, "7"));
    for name in ["scans", "imu.csv", "groundtruth.txt", "meta.json"] {
        assert!(a.join(name).exists(), "{name}");
    }
    assert_eq!(first["frames"], 5);
    assert_eq!(first["digest"], second["digest"]);
}

#[test]
fn simulate_records_the_room_preset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("room");
    let o = alio(&["simulate", "--preset", "room", "--size", "10,8,3", "--duration", "0.2", "--rays", "100", "--out", out.to_str().unwrap()]);
    stdout_json(&o);
    let meta: Value = serde_json::from_str(&fs::read_to_string(out.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["preset"], "room");
    assert_eq!(meta["simulation"]["preset"]["size"], serde_json::json!([10.0, 8.0, 3.0]));
}

#[test]
fn simulate_rejects_flags_of_another_preset() {
    let dir = tempfile::tempdir().unwrap();
    let o = alio(&["simulate", "--preset", "room", "--radius", "2", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_error(&o)["error"], "usage");
}

#[test]
fn run_writes_outputs_and_effective_config_reproduces_it() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d");
    small_corridor(&data, "1");
    let r1 = dir.path().join("r1");
    let summary = stdout_json(&alio(&[
        "run", "--dataset", data.to_str().unwrap(), "--method", "full", "--set", "solver.max_iterations=4",
        "--out", r1.to_str().unwrap(),
    ]));
    assert_eq!(summary["frames"], 5);
    assert!(summary["rmse"].as_f64().unwrap() < 0.1);
    let traj = fs::read_to_string(r1.join("trajectory.txt")).unwrap();
    assert_eq!(traj.lines().count(), 5);
    for f in ["degeneracy.csv", "frames.csv", "map.ply", "residuals.csv", "effective_config.json"] {
        assert!(r1.join(f).exists(), "{f}");
    }
    let effective: Value = serde_json::from_str(&fs::read_to_string(r1.join("effective_config.json")).unwrap()).unwrap();
    assert_eq!(effective["estimator"]["solver"]["max_iterations"], 4);

    // Re-run from the effective config alone, writing somewhere else.
    let mut replay = effective.clone();
    let r2 = dir.path().join("r2");
    replay["out"] = Value::String(r2.to_str().unwrap().into());
    let replay_path = dir.path().join("replay.json");
    fs::write(&replay_path, serde_json::to_string(&replay).unwrap()).unwrap();
    stdout_json(&alio(&["run", "--config", replay_path.to_str().unwrap()]));
    for f in ["trajectory.txt", "degeneracy.csv", "frames.csv", "map.ply", "residuals.csv"] {
        assert_eq!(fs::read(r1.join(f)).unwrap(), fs::read(r2.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn invalid_method_is_a_usage_error() {
    let o = alio(&["run", "--dataset", "x", "--method", "foo", "--out", "y"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr_error(&o);
    assert_eq!(e["error"], "usage");
    assert_eq!(e["code"], 2);
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = alio(&["run", "--dataset", dir.path().join("nope").to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stderr_error(&o)["error"], "data");
}

#[test]
fn invalid_config_value_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = alio(&["run", "--dataset", "x", "--set", "degeneracy.gamma=3", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_exits_zero() {
    assert_eq!(alio(&["--help"]).status.code(), Some(0));
    assert_eq!(alio(&["run", "--help"]).status.code(), Some(0));
}

fn write_tum(path: &Path, rows: &[(f64, [f64; 3])]) {
    let text: String = rows.iter().map(|(t, p)| format!("{t} {} {} {} 0 0 0 1\n", p[0], p[1], p[2])).collect();
    fs::write(path, text).unwrap();
}

#[test]
fn evaluate_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt.txt");
    let rows: Vec<_> = (0..10).map(|i| (i as f64 * 0.1, [i as f64, 0.0, 0.0])).collect();
    write_tum(&gt, &rows);
    let g = gt.to_str().unwrap();

    let itself = stdout_json(&alio(&["evaluate", "--est", g, "--gt", g]));
    assert_eq!(itself["rmse"], 0.0);

    let shifted = dir.path().join("shift.txt");
    write_tum(&shifted, &rows.iter().map(|(t, p)| (*t, [p[0], p[1] + 0.5, p[2]])).collect::<Vec<_>>());
    let csv = dir.path().join("out/ape.csv");
    let s = stdout_json(&alio(&[
        "evaluate", "--est", shifted.to_str().unwrap(), "--gt", g, "--alignment", "none", "--out", csv.to_str().unwrap(),
    ]));
    assert!((s["rmse"].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert!(fs::read_to_string(&csv).unwrap().starts_with("rmse,mean,max,count\n"));

    let (e2, g2) = (dir.path().join("e2.txt"), dir.path().join("g2.txt"));
    write_tum(&g2, &[(0.0, [0.0; 3]), (0.1, [0.0; 3])]);
    write_tum(&e2, &[(0.0, [0.3, 0.0, 0.0]), (0.1, [0.0, 0.4, 0.0])]);
    let s = stdout_json(&alio(&[
        "evaluate", "--est", e2.to_str().unwrap(), "--gt", g2.to_str().unwrap(), "--alignment", "none",
    ]));
    assert!((s["rmse"].as_f64().unwrap() - 0.125f64.sqrt()).abs() < 1e-12);
}

#[test]
fn evaluate_reports_parse_errors_with_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.txt");
    fs::write(&bad, "0 0 0 0 0 0 0 1\n0.1 0 0 0 0 0 1\n").unwrap();
    let o = alio(&["evaluate", "--est", bad.to_str().unwrap(), "--gt", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr_error(&o)["message"].as_str().unwrap().contains("line 2"));
}

#[test]
fn ablate_counts_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("corr_a"), dir.path().join("corr_b"));
    small_corridor(&a, "1");
    small_corridor(&b, "2");
    let out = dir.path().join("one");
    stdout_json(&alio(&["ablate", "--datasets", a.to_str().unwrap(), "--seeds", "3", "--out", out.to_str().unwrap()]));
    assert_eq!(fs::read_to_string(out.join("runs.csv")).unwrap().lines().count(), 1 + 3);
    assert_eq!(fs::read_to_string(out.join("comparison.csv")).unwrap().lines().count(), 1 + 3);
    assert!(out.join("runs/corr_a/seed_3/full/trajectory.txt").exists());

    let out = dir.path().join("two");
    stdout_json(&alio(&[
        "ablate", "--datasets", a.to_str().unwrap(), b.to_str().unwrap(), "--seeds", "0,1,2,3,4",
        "--set", "solver.max_iterations=2", "--out", out.to_str().unwrap(),
    ]));
    let comparison = fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert_eq!(comparison.lines().count(), 1 + 6);
    assert!(comparison.starts_with("sequence,method,rmse,mean,max,frames\n"));
    let runs = fs::read_to_string(out.join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 30);
    assert!(runs.lines().skip(1).all(|l| l.split(',').nth(3) == Some("ok")));
}
