use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regime-lq"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn problem(name: &str) -> String {
    format!("{}/problems/{name}.json", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn validate_accepts_shipped_problems() {
    let tmp = tempfile::tempdir().unwrap();
    for name in ["modulated-homogeneous", "modulated-drift", "anti-convex", "scalar-classical"] {
        let out = bin(&["validate", "--problem", &problem(name)], tmp.path());
        assert_eq!(out.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&out.stdout));
        let report: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("validate.json")).unwrap()).unwrap();
        assert_eq!(report["passed"], true);
    }
}

#[test]
fn malformed_problem_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"n": 1, "m": 1}"#).unwrap();
    let out = bin(&["validate", "--problem", bad.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(2));

    let out = bin(
        &["riccati", "--problem", tmp.path().join("missing.json").to_str().unwrap()],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));

    let out = bin(&["riccati", "--problem", "builtin:nope"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flag_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        vec!["sweep", "--problem", "builtin:modulated-drift", "--eps", "0.1,0.01"],
        vec!["sweep", "--problem", "builtin:modulated-drift", "--eps", "0.1,0.5,0.01"],
        vec!["simulate", "--problem", "builtin:modulated-drift", "--paths", "0"],
        vec!["riccati", "--problem", "builtin:modulated-drift", "--steps", "ten"],
        vec!["frobnicate"],
    ] {
        let out = bin(&args, tmp.path());
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn riccati_writes_the_closed_form() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin(
        &["riccati", "--problem", "builtin:modulated-drift", "--eps", "0.1", "--steps", "1000"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(tmp.path().join("riccati_eps_1e-1.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("s,regime,p"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 2 * 1001);
    for r in &rows {
        let (s, regime, p) = (r[0], r[1], r[2]);
        assert!(regime == 1.0 || regime == 2.0);
        assert!((p - 0.1 / (1.1 - s)).abs() < 1e-8, "s = {s}: {p}");
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report[0]["regularity"]["classification"], "not-regular");
}

#[test]
fn riccati_escape_is_a_solver_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin(&["riccati", "--problem", "builtin:anti-convex", "--eps", "0.1"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn sweep_writes_a_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin(
        &[
            "sweep",
            "--problem",
            "builtin:modulated-drift",
            "--paths",
            "500",
            "--steps",
            "200",
            "--eps",
            "0.5,0.1,0.05",
            "--seed",
            "3",
            "--threads",
            "2",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "report.json",
        "norms.csv",
        "cauchy_u.csv",
        "cauchy_theta.csv",
        "cauchy_v.csv",
        "theta_eps_5e-1.csv",
        "v_eps_5e-2.csv",
    ] {
        assert!(tmp.path().join(f).exists(), "{f} missing");
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["scenarios"], 500);
    assert_eq!(report["records"].as_array().unwrap().len(), 3);
}

#[test]
fn anti_convex_sweep_reports_escapes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin(
        &["sweep", "--problem", "builtin:anti-convex", "--paths", "200", "--steps", "200"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["verdict"], "not-solvable");
    assert!(report["records"].as_array().unwrap().iter().any(|r| r["escape_time"].is_number()));
}

#[test]
fn simulate_writes_ensemble_and_cost() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin(
        &[
            "simulate",
            "--problem",
            "builtin:scalar-classical",
            "--paths",
            "100",
            "--steps",
            "100",
            "--eps",
            "0.1",
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let stats = fs::read_to_string(tmp.path().join("closed_loop_eps_1e-1_stats.csv")).unwrap();
    assert_eq!(stats.lines().count(), 102);
    let paths = fs::read_to_string(tmp.path().join("closed_loop_eps_1e-1_paths.csv")).unwrap();
    assert_eq!(paths.lines().count(), 1 + 20 * 101);
    let cost: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("closed_loop_eps_1e-1_cost.json")).unwrap()).unwrap();
    assert_eq!(cost["paths"], 100);
}

#[test]
fn help_and_version_exit_cleanly() {
    let run = |args: &[&str]| Command::new(env!("CARGO_BIN_EXE_regime-lq")).args(args).output().unwrap();
    let help = run(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("oracle-check"));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&[]).status.code(), Some(2));
}
