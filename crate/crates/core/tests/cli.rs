use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn qfusion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qfusion")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_then_eval_and_dump() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = qfusion(&["train", "--config", path(&smoke()), "--mr", "0.2", "--seed", "3", "--out", path(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let trained: Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    let record: Value = serde_json::from_str(&fs::read_to_string(run.join("train.json")).unwrap()).unwrap();
    assert_eq!(record["history"].as_array().unwrap().len(), 5);
    assert_eq!(record["test"], trained);

    // Same schedule seed, same metrics.
    let params = run.join("params");
    let out = qfusion(&["eval", "--params", path(&params), "--mr", "0.2"]);
    assert_eq!(code(&out), 0);
    let evaluated: Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(evaluated, trained);

    let maps = dir.path().join("maps");
    let out = qfusion(&["reliability-dump", "--params", path(&params), "--out", path(&maps), "--mr", "0.3"]);
    assert_eq!(code(&out), 0);
    for name in ["optical_L", "sar_R", "summary.csv", "schedule.csv"] {
        assert!(fs::read_dir(&maps)
            .unwrap()
            .any(|e| e.unwrap().file_name().to_string_lossy().starts_with(name)), "{name}");
    }
    let summary = fs::read_to_string(maps.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2 * 64);
}

#[test]
fn sweep_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("sweep.csv");
    let out = qfusion(&[
        "sweep",
        "--config",
        path(&smoke()),
        "--mr",
        "0.0:0.2:0.1",
        "--variants",
        "mean_baseline,full",
        "--seeds",
        "0..=1",
        "--out",
        path(&csv),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 1 + 2 * 3 * 2);
    let summary: Value = serde_json::from_str(&fs::read_to_string(csv.with_extension("json")).unwrap()).unwrap();
    assert_eq!(summary["summary"].as_array().unwrap().len(), 6);
    assert_eq!(stdout(&out).lines().count(), 6);
}

#[test]
fn grad_check_reports_small_error() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("grad.json");
    let out = qfusion(&["grad-check", "--config", path(&smoke()), "--h", "1e-5", "--out", path(&report)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(v["report"]["max_rel_err"].as_f64().unwrap() < 1e-5);
    assert!(v["margin"].as_f64().unwrap() >= 1e-3);

    let out = qfusion(&["grad-check", "--config", path(&smoke()), "--suite", "2", "--out", path(&report)]);
    assert_eq!(code(&out), 0);
    let v: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["cases"].as_array().unwrap().len(), 2);
}

#[test]
fn bad_inputs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = qfusion(&["train", "--config", path(&missing), "--out", path(dir.path())]);
    assert_eq!(code(&out), 2);

    let out = qfusion(&["train", "--config", path(&smoke()), "--mr", "0.6", "--out", path(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("0.5"));

    let out = qfusion(&["eval", "--params", path(dir.path())]);
    assert_eq!(code(&out), 2);
}

#[test]
fn divergence_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: Value = serde_json::from_str(&fs::read_to_string(smoke()).unwrap()).unwrap();
    cfg["lr"] = Value::from(1e300);
    let cfg_path = dir.path().join("hot.json");
    fs::write(&cfg_path, cfg.to_string()).unwrap();
    let out = qfusion(&["train", "--config", path(&cfg_path), "--out", path(&dir.path().join("run"))]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}
