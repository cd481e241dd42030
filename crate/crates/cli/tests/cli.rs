use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn scenario(name: &str) -> PathBuf {
    workspace_root().join("scenarios").join(name)
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn scl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scl")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn edited(base: &Path, dir: &Path, name: &str, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(base).unwrap()).unwrap();
    edit(&mut v);
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_reference_scenario_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = scenario("paper_sec6.json");
    let out = scl(&["simulate", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let summary = read_json(&dir.path().join("summary.json"));
    let text = std::fs::read_to_string(&config).unwrap();
    assert_eq!(summary["config_hash"], scl_core::scenario::config_hash(&text).unwrap());
    assert!(summary["first_violation_t"].is_null());
    for key in ["final_gap", "time_to_1e-1", "time_to_1e-2", "log_slope", "min_margin", "certified", "cbf_min"] {
        assert!(summary.get(key).is_some(), "missing {key}");
    }
    let y_star = summary["y_star"].as_array().unwrap();
    assert!((y_star[0].as_f64().unwrap() - 2f64.sqrt()).abs() < 1e-8);

    let csv = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,agent,x1,x2,x3,y1,y2,z1,z2,eta1,eta2,s1,s2,u1,u2,h,margin_omega,margin_ball,gap"
    );
    assert_eq!(lines.count(), 5 * (30_000 / 10 + 1));

    let feas = read_json(&dir.path().join("feasibility.json"));
    assert_eq!(feas["checks"].as_array().unwrap().len(), 10);
    let plot = read_json(&dir.path().join("plotdata.json"));
    assert!(plot["t"].as_array().unwrap().len() <= 501);
}

#[test]
fn step_and_horizon_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = scenario("paper_sec6.json");
    let out = scl(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--step",
        "0.002",
        "--horizon",
        "1",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary = read_json(&dir.path().join("summary.json"));
    assert_eq!(summary["samples"].as_u64().unwrap(), 500 / 10 + 1);
}

#[test]
fn beta_above_one_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = edited(&scenario("paper_sec6.json"), dir.path(), "b.json", |v| {
        v["protocol"]["beta"] = 2.0.into();
    });
    let out = scl(&["simulate", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("beta must lie in (0,1]"), "{}", stderr(&out));
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = edited(&scenario("paper_sec6.json"), dir.path(), "m.json", |v| {
        v.as_object_mut().unwrap().remove("protocol");
    });
    let out = scl(&["check-params", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("protocol"), "{}", stderr(&out));
}

#[test]
fn fast_expansion_is_a_safety_violation() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture("fast_expansion.json");
    let out = scl(&["simulate", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let summary = read_json(&dir.path().join("summary.json"));
    assert!(summary["first_violation_t"].as_f64().unwrap() > 0.0);

    // The same plants with a slow schedule stay inside Ω.
    let slow = edited(&config, dir.path(), "slow.json", |v| {
        v["expanding"]["rate"] = 0.05.into();
    });
    let out = scl(&["simulate", "--config", slow.to_str().unwrap(), "--out", dir.path().join("slow").to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn negative_initial_barrier_is_a_safety_violation() {
    let dir = tempfile::tempdir().unwrap();
    let config = edited(&scenario("paper_sec6.json"), dir.path(), "h.json", |v| {
        v["initial"]["y0"] = serde_json::json!([[1.9, 0.0], [1.9, 0.0], [1.9, 0.0], [1.9, 0.0], [1.9, 0.0]]);
        v["initial"]["eta0"] = serde_json::json!([[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]]);
    });
    let out = scl(&["simulate", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("h(0)"), "{}", stderr(&out));
}

#[test]
fn strict_certify_rejects_uncertified_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let config = edited(&scenario("paper_sec6.json"), dir.path(), "s.json", |v| {
        v["integration"]["horizon"] = 0.5.into();
    });
    let out = scl(&[
        "simulate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--strict-certify",
    ]);
    assert_eq!(code(&out), 6);
    assert!(stderr(&out).contains("alpha_admissible"));
}

#[test]
fn batch_runs_every_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let batch = dir.path().join("batch");
    std::fs::create_dir(&batch).unwrap();
    for (name, horizon) in [("a.json", 0.5), ("b.json", 0.3)] {
        edited(&scenario("interior.json"), &batch, name, |v| {
            v["integration"]["horizon"] = horizon.into();
        });
    }
    let out_dir = dir.path().join("out");
    let out = scl(&["simulate", "--batch", batch.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(out_dir.join("a/summary.json").exists());
    assert!(out_dir.join("b/trace.csv").exists());
}

#[test]
fn check_params_reports_every_inequality() {
    let out = scl(&["check-params", "--config", scenario("paper_sec6.json").to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let checks = report["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 10);
    assert!(checks.iter().all(|c| c["margin"].is_number() || c["margin"].is_null()));
    assert_eq!(report["certified"], false);

    let dir = tempfile::tempdir().unwrap();
    let zero_alpha = edited(&scenario("paper_sec6.json"), dir.path(), "a0.json", |v| {
        v["protocol"]["alpha"] = 0.0.into();
    });
    let out = scl(&["check-params", "--config", zero_alpha.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let alpha = report["checks"].as_array().unwrap().iter().find(|c| c["name"] == "alpha_admissible").unwrap();
    assert_eq!(alpha["passed"], false);
}

#[test]
fn check_params_certifies_large_gains_and_tiny_beta() {
    let dir = tempfile::tempdir().unwrap();
    let config = edited(&scenario("paper_sec6.json"), dir.path(), "g.json", |v| {
        v["protocol"] = serde_json::json!({"alpha": 0.004, "beta": 1e-23, "k1": 3e4, "k2": 1e17});
    });
    let out = scl(&["check-params", "--config", config.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["certified"], true, "{report}");
}

#[test]
fn solve_regulator_outputs_and_rank_failure() {
    let out = scl(&["solve-regulator", "--config", scenario("paper_sec6.json").to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let entries: Value = serde_json::from_slice(&out.stdout).unwrap();
    let first = &entries[0];
    assert_eq!(first["agent"], 1);
    let third: Vec<f64> = first["pi"][2].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!((third[0] + 0.25).abs() < 1e-12 && (third[1] + 0.75).abs() < 1e-12);
    for e in entries.as_array().unwrap() {
        assert!(e["residual_dynamics"].as_f64().unwrap() <= 1e-10);
        assert!(e["residual_output"].as_f64().unwrap() <= 1e-10);
    }

    let dir = tempfile::tempdir().unwrap();
    let dead = edited(&scenario("paper_sec6.json"), dir.path(), "dead.json", |v| {
        v["agents"][2]["B"] = serde_json::json!([[0.0, 0.0], [0.0, 0.0], [0.0, 0.0]]);
    });
    let out = scl(&["solve-regulator", "--config", dead.to_str().unwrap()]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("agent 3"), "{}", stderr(&out));
}

#[test]
fn oracle_examples() {
    let out = scl(&["oracle", "--config", scenario("paper_sec6.json").to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    for v in report["y_star"].as_array().unwrap() {
        assert!((v.as_f64().unwrap() - 2f64.sqrt()).abs() < 1e-8);
    }
    assert!(report["residual"].as_f64().unwrap() <= 1e-12);

    let out = scl(&["oracle", "--config", scenario("interior.json").to_str().unwrap()]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    let y: Vec<f64> = report["y_star"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!((y[0] - 0.1).abs() < 1e-10 && (y[1] - 0.1).abs() < 1e-10, "{y:?}");

    let dir = tempfile::tempdir().unwrap();
    let boxed = edited(&scenario("paper_sec6.json"), dir.path(), "box.json", |v| {
        v["graph"] = serde_json::json!({"n_agents": 2, "edges": [[1, 2, 1.0]]});
        v["objectives"] = serde_json::json!([
            {"type": "quadratic", "target": [2.0, 0.0]},
            {"type": "quadratic", "target": [0.0, 2.0]}
        ]);
        v["constraint"] = serde_json::json!({"type": "box", "lower": [-0.5, -0.5], "upper": [0.5, 0.5]});
    });
    let out = scl(&["oracle", "--config", boxed.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["y_star"], serde_json::json!([0.5, 0.5]));
}
