use std::path::Path;
use std::process::{Command, Output};

fn drtk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drtk")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn simulate(dir: &Path) -> (String, String) {
    let csv = dir.join("data.csv").to_string_lossy().into_owned();
    let out = drtk(&["simulate", "--spec", "simple-1", "--n", "300", "--seed", "4", "--out", &csv, "--truth-n", "1000000"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (csv, dir.join("data.schema.json").to_string_lossy().into_owned())
}

const GLM_AIPW: &str = r#"{"method": "AIPW", "library": {"label": "glm", "learners": [{"kind": "glm-main"}]}}"#;

#[test]
fn estimate_happy_path() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, schema) = simulate(dir.path());
    let truth: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("data.truth.json")).unwrap()).unwrap();
    assert!(truth["psi"].as_f64().unwrap() > 0.0);
    let cfg = write(dir.path(), "cfg.json", GLM_AIPW);
    let out = drtk(&["estimate", "--data", &csv, "--schema", &schema, "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let est: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(est["method"], "AIPW");
    assert!(est["psi"].as_f64().unwrap().is_finite());
    assert!(est["se"].as_f64().unwrap() > 0.0);
}

#[test]
fn missing_cell_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let csv = write(dir.path(), "d.csv", "y,x,a\n1.0,1,0.5\n2.0,0,\n0.5,1,0.1\n0.1,0,0.3\n");
    let schema = write(dir.path(), "s.json", r#"{"outcome": "y", "exposure": "x", "confounders": ["a"]}"#);
    let cfg = write(dir.path(), "cfg.json", GLM_AIPW);
    let out = drtk(&["estimate", "--data", &csv, "--schema", &schema, "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row") && err.contains("'a'"), "{err}");
}

#[test]
fn single_fold_crossfit_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, schema) = simulate(dir.path());
    let cfg = write(dir.path(), "cfg.json", r#"{"method": "TMLE", "crossfit": 1}"#);
    let out = drtk(&["estimate", "--data", &csv, "--schema", &schema, "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("K >= 2"));
}

#[test]
fn unknown_spec_is_a_validation_error() {
    let out = drtk(&["truth", "--spec", "no-such-spec", "--n", "1000000"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn benchmark_grid_and_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let config = r#"{
        "scenarios": [{"spec": "simple-1", "n": 200, "reps": 10}],
        "estimators": [
            {"method": "AIPW", "library": "reduced", "sl_folds": 5},
            {"method": "TMLE", "library": "reduced", "sl_folds": 5},
            {"method": "AIPW", "library": "reduced", "sl_folds": 5, "crossfit": 2},
            {"method": "TMLE", "library": "reduced", "sl_folds": 5, "crossfit": 2}
        ],
        "seed": 5,
        "truth_n": 1000000
    }"#;
    let cfg = write(dir.path(), "bench.json", config);
    let cache = dir.path().join("truth");
    std::fs::create_dir_all(&cache).unwrap();
    let run = |name: &str, workers: &str| {
        let out_dir = dir.path().join(name);
        let out = drtk(&["benchmark", "--config", &cfg, "--out", out_dir.to_str().unwrap(), "--workers", workers]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out_dir
    };
    let a = run("a", "1");
    let b = run("b", "2");
    let replications = std::fs::read_to_string(a.join("replications.csv")).unwrap();
    assert_eq!(replications.lines().count(), 1 + 40);
    for f in ["replications.csv", "performance.csv", "performance_all.csv", "performance_excluded.csv", "manifest.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let perf = std::fs::read_to_string(a.join("performance.csv")).unwrap();
    assert!(perf.starts_with(
        "scenario,method,library,cf_folds,n,S,excluded,bias,bias_mcse,relbias_pct,empse,empse_mcse,modse,modse_relerr_pct,modse_relerr_mcse,coverage_pct,coverage_mcse\n"
    ));
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["failed"], 0);
    assert!(manifest["scenarios"][0]["truth"]["mcse"].as_f64().unwrap() > 0.0);
}
