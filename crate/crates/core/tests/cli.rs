use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splitmachine")).current_dir(root()).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn unknown_scenario_is_a_usage_error() {
    let o = cli(&["run", "no-such-scenario"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
}

#[test]
fn unknown_fault_is_a_usage_error() {
    assert_eq!(cli(&["--inject", "gremlins", "run", "boot"]).status.code(), Some(2));
    assert_eq!(cli(&["check", "--bounds", "huge"]).status.code(), Some(2));
}

#[test]
fn boot_prints_measurements() {
    let o = cli(&["boot"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("scenario boot: PASS"), "{out}");
    assert!(out.contains("pcrs"), "{out}");
}

#[test]
fn failing_scenario_exits_one() {
    let o = cli(&["--inject", "rm-skip-reset", "run", "banking"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn small_check_passes() {
    let o = cli(&["check", "--bounds", "small"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("0 violations"), "{out}");
    assert_eq!(out.matches("caught, ").count(), 6, "{out}");
}

#[test]
fn counterexamples_written_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["check", "--bounds", "small", "--cex-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let files: Vec<PathBuf> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().path()).collect();
    assert!(!files.is_empty());
    for f in files.iter().take(5) {
        let r = cli(&["check", "--replay", f.to_str().unwrap()]);
        assert_eq!(r.status.code(), Some(0), "{}: {}", f.display(), stdout(&r));
        assert!(stdout(&r).contains("Confirmed"));
    }
}

#[test]
fn trace_file_feeds_tcb() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("bank.jsonl");
    let o = cli(&["--manifest", "manifests/default.json", "--trace-out", trace.to_str().unwrap(), "run", "banking"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = std::fs::read_to_string(&trace).unwrap();
    assert!(text.lines().count() > 100);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["tick"].is_u64() && v["event"].is_string());
    }

    let t = cli(&["--json", "tcb", trace.to_str().unwrap()]);
    assert_eq!(t.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&t.stdout).unwrap();
    assert!(report.is_object());
}

#[test]
fn scenario_file_runs() {
    let o = cli(&["--json", "run", "scenarios/insulin.json"]);
    assert_eq!(o.status.code(), Some(0));
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["passed"], true);
    assert_eq!(r["metrics"]["history"].as_array().unwrap().len(), 5);
}
