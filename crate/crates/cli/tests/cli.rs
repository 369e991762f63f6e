use std::path::Path;
use std::process::Command;

use corrdemo::experiments::rows_from_csv;

fn corrdemo(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_corrdemo")).args(args).env_remove("CORRDEMO_THREADS").output().expect("binary runs")
}

fn summary(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn run_online_within_log_bound() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("online");
    let o = corrdemo(&[
        "run-online",
        "--instance",
        "random:S=64",
        "--learner",
        "alg1:realizable",
        "--T",
        "200",
        "--trials",
        "20",
        "--budget",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = rows_from_csv(&std::fs::read_to_string(out.join("results.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 20);
    assert!(rows.iter().all(|r| r.observed_f64 <= 6.0 && r.bound == "6"));
    let s = summary(&out);
    assert_eq!(s["pass"], true);
    assert_eq!(s["rows"], 20);
    assert!(s["worst_slack"].is_string());
}

#[test]
fn mle_unif_loss_is_constant_half() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("mle");
    let o = corrdemo(&["run-mle-failure", "--which", "unif", "--gamma", "0.5", "--m", "1..50", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = rows_from_csv(&std::fs::read_to_string(out.join("results.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 50);
    assert!(rows.iter().all(|r| r.observed == "1/2" && r.pass));
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for threads in ["1", "3"] {
        let out = dir.path().join(threads);
        let o = corrdemo(&[
            "run-batch",
            "--instance",
            "majority_lb:d=9",
            "--m",
            "1,2,4",
            "--trials",
            "12",
            "--seed",
            "5",
            "--threads",
            threads,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        csvs.push(std::fs::read(out.join("results.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"experiment": "ignored", "grid": [2], "trials": 3}"#).unwrap();
    let out = dir.path().join("cloning");
    let o = corrdemo(&["run-cloning-report", "--config", cfg.to_str().unwrap(), "--m", "1", "--svg", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = rows_from_csv(&std::fs::read_to_string(out.join("results.csv")).unwrap()).unwrap();
    assert!(rows.iter().all(|r| r.param == 1));
    let s = summary(&out);
    assert_eq!(s["config"]["trials"], 3);
}

#[test]
fn bad_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = corrdemo(&["run-online", "--learner", "nonsense", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = corrdemo(&["validate-instance", "--instance", "passk_online:k=3,d=1000000000", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn validate_instance_reports_shape() {
    let dir = tempfile::tempdir().unwrap();
    let o = corrdemo(&["validate-instance", "--instance", "majority_lb:d=9", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let s = summary(dir.path());
    assert_eq!(s["instance"]["hypotheses"], 9);
    assert_eq!(s["instance"]["contexts"], 4);
    assert_eq!(s["pass"], true);
}
