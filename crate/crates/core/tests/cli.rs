//! Drives the `weightpath` binary through a small oracle pipeline.

use std::path::Path;
use std::process::{Command, Output};

fn weightpath(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weightpath"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const CONFIG: &str = r#"{
    "oracle": {"n": 12, "trajectories": 5, "steps": 40, "start_rank": 3},
    "d": 4,
    "tipl": {"embed_dim": 8, "layers": 1, "batch_size": 4, "batches_per_iter": 10, "iters": 2, "dropout": 0.0},
    "eval": {"prefix_len": 5, "k": 3, "min_stride": 1}
}"#;

#[test]
fn oracle_pipeline_runs_and_skips_when_current() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.json"), CONFIG).unwrap();
    let args = |stage: &'static str| [stage, "--config", "run.json", "--work-dir", "work"];
    for stage in ["collect-oracle", "encode", "train", "evaluate", "report"] {
        let out = weightpath(&args(stage), dir.path());
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(stdout(&out).contains("wrote"), "{stage}: {}", stdout(&out));
    }
    let csv = std::fs::read_to_string(dir.path().join("work/report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,trial,snapshot,wpe,repw,j_true,j_pred"));
    assert!(lines.count() > 0);
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("work/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["median_wpe_per_step"].as_array().unwrap().len(), 3);

    let again = weightpath(&args("train"), dir.path());
    assert!(again.status.success());
    assert!(stdout(&again).contains("up to date"));

    let changed = weightpath(&["train", "--config", "run.json", "--work-dir", "work", "--train-seed", "7"], dir.path());
    assert!(changed.status.success());
    assert!(stdout(&changed).contains("wrote"));
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(weightpath(&["bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(weightpath(&["train", "--lr", "0"], dir.path()).status.code(), Some(2));
    assert_eq!(weightpath(&["collect", "--trials", "0"], dir.path()).status.code(), Some(2));
    let missing = weightpath(&["encode", "--work-dir", "nothing-here"], dir.path());
    assert_eq!(missing.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nothing-here"));
    assert_eq!(weightpath(&["--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn bad_config_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), "{ not json").unwrap();
    let out = weightpath(&["encode", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json"));
}
