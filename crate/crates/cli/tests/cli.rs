use std::path::Path;
use std::process::Command;

use serde_json::json;

fn write_config(dir: &Path, name: &str, value: serde_json::Value) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    path
}

fn switchlab(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_switchlab")).args(args).output().unwrap()
}

fn simulate_config(out: &Path) -> serde_json::Value {
    json!({
        "model": {"builtin": "ex1"},
        "task": "simulate",
        "seed": 11,
        "out": out,
        "params": {"t_end": 1.0, "x0": [0.5], "regime": 1}
    })
}

#[test]
fn simulate_smoke_writes_trajectory_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    let cfg = write_config(dir.path(), "sim.json", simulate_config(&out));
    let res = switchlab(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["trajectory.csv", "jumps.csv", "summary.json", "manifest.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let traj = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    let mut lines = traj.lines();
    assert_eq!(lines.next(), Some("t,x_1,alpha"));
    assert_eq!(lines.count(), 1001);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "ok");
    assert_eq!(manifest["seed"], 11);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["mode"], "euler-rate");
    assert_eq!(summary["dt"], 0.001);
}

#[test]
fn identical_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sim.json", simulate_config(&dir.path().join("unused")));
    let mut outputs = Vec::new();
    for (k, threads) in ["1", "3"].iter().enumerate() {
        let out = dir.path().join(format!("run{k}"));
        let res = switchlab(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--threads",
            threads,
        ]);
        assert!(res.status.success());
        outputs.push(std::fs::read(out.join("trajectory.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "sim.json", simulate_config(&dir.path().join("a")));
    let b = dir.path().join("b");
    assert!(switchlab(&["simulate", "--config", cfg.to_str().unwrap()]).status.success());
    assert!(switchlab(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", "12", "--out", b.to_str().unwrap()])
        .status
        .success());
    let a = std::fs::read(dir.path().join("a/trajectory.csv")).unwrap();
    assert_ne!(a, std::fs::read(b.join("trajectory.csv")).unwrap());
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 12);
}

#[test]
fn exit_time_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exit");
    let model = json!({
        "name": "bm", "n": 1, "r": 1.0,
        "drift": [{"regimes": "*", "expr": ["0"]}],
        "diffusion": [{"regimes": "*", "expr": ["1"]}],
        "kernel": {"form": "expression-table", "entries": [], "bound": {"global": 0.0}}
    });
    write_config(dir.path(), "bm.json", model);
    let cfg = write_config(
        dir.path(),
        "exit.json",
        json!({
            "model": {"file": "bm.json"},
            "task": "exit-time",
            "out": out,
            "params": {"lo": 0.0, "hi": 1.0, "h": 0.01, "k": 1}
        }),
    );
    let res = switchlab(&["exit-time", "--config", cfg.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = std::fs::read_to_string(out.join("solution.csv")).unwrap();
    let mid = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|c| c.parse::<f64>().unwrap()).collect::<Vec<_>>())
        .find(|r| (r[0] - 0.5).abs() < 1e-12)
        .expect("node at 0.5");
    assert!((mid[2] - 0.25).abs() <= 1e-9, "u(0.5) = {}", mid[2]);
    assert!(out.join("trace.csv").exists());
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = simulate_config(&dir.path().join("x"));
    v["params"]["t_end"] = json!("later");
    let cfg = write_config(dir.path(), "bad.json", v);
    let res = switchlab(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("params.t_end"));
    // Config written for a different task.
    let cfg = write_config(dir.path(), "sim.json", simulate_config(&dir.path().join("y")));
    assert_eq!(switchlab(&["tv", "--config", cfg.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(switchlab(&["simulate", "--config", "/nonexistent.json"]).status.code(), Some(2));
}

#[test]
fn non_convergence_exits_with_code_3_and_partial_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exit");
    let cfg = write_config(
        dir.path(),
        "exit.json",
        json!({
            "model": {"builtin": "ex1", "params": {"c": [1.0], "b": "0", "sigma": "1"}},
            "task": "exit-time",
            "out": out,
            "params": {"lo": 0.0, "hi": 1.0, "h": 0.05, "k": 4, "max_iter": 2}
        }),
    );
    let res = switchlab(&["exit-time", "--config", cfg.to_str().unwrap()]);
    // ex1 rates read the segment norm, so the elliptic solver refuses it: a setup error.
    assert_eq!(res.status.code(), Some(2));

    let model = json!({
        "name": "pair", "n": 1, "r": 1.0,
        "drift": [{"regimes": "*", "expr": ["0"]}],
        "diffusion": [{"regimes": "*", "expr": ["1"]}],
        "kernel": {"form": "expression-table", "entries": [
            {"from": "1", "to": "2", "rate": "1"},
            {"from": "2", "to": "1", "rate": "3"}
        ], "bound": {"global": 3.0}}
    });
    let cfg = write_config(
        dir.path(),
        "exit2.json",
        json!({
            "model": {"spec": model},
            "task": "exit-time",
            "out": out,
            "params": {"lo": 0.0, "hi": 1.0, "h": 0.05, "k": 2, "max_iter": 2}
        }),
    );
    let res = switchlab(&["exit-time", "--config", cfg.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["status"], "failed");
    assert!(out.join("trace.csv").exists());
    assert!(!out.join("solution.csv").exists());
}
