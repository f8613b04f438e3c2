use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pairsim_core::engine::EventLog;

fn pairsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pairsim")).args(args).output().unwrap()
}

fn scenario(file: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(file).to_str().unwrap().to_string()
}

fn path(dir: &Path, name: &str) -> (PathBuf, String) {
    let p = dir.join(name);
    let s = p.to_str().unwrap().to_string();
    (p, s)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn validate_accepts_good_files_and_rejects_missing_capabilities() {
    assert_eq!(pairsim(&["scenario", "validate", &scenario("six.json")]).status.code(), Some(0));
    let bad = pairsim(&["scenario", "validate", &scenario("invalid_d2b.json")]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("Display"), "{}", stderr(&bad));
}

#[test]
fn malformed_json_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let (p, s) = path(dir.path(), "bad.json");
    std::fs::write(&p, r#"{"name": "x", "method": "pdf2b"}"#).unwrap();
    assert_eq!(pairsim(&["scenario", "validate", &s]).status.code(), Some(1));
    std::fs::write(&p, "[]").unwrap();
    assert_eq!(pairsim(&["run", "--batch", &s, "--out", &s]).status.code(), Some(1));
}

#[test]
fn missing_input_is_a_runtime_error() {
    assert_eq!(pairsim(&["scenario", "validate", "/nonexistent/x.json"]).status.code(), Some(2));
    assert_eq!(pairsim(&["report", "--in", "/nonexistent/log", "--format", "csv", "--out", "/tmp/x"]).status.code(), Some(2));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(pairsim(&[]).status.code(), Some(1));
    assert_eq!(pairsim(&["run", "--seed", "1"]).status.code(), Some(1));
    assert_eq!(pairsim(&["peer", "--scenario", "x.json"]).status.code(), Some(1));
    assert_eq!(pairsim(&["--help"]).status.code(), Some(0));
}

#[test]
fn run_writes_one_record_per_repetition_and_report_reads_it() {
    let dir = tempfile::tempdir().unwrap();
    let (log_path, log) = path(dir.path(), "six.jsonl");
    let run = pairsim(&["run", "--batch", &scenario("six.json"), "--seed", "42", "--out", &log, "--threads", "3"]);
    assert_eq!(run.status.code(), Some(0), "{}", stderr(&run));
    assert_eq!(EventLog::load(&log_path).unwrap().len(), 6);

    let sequential = dir.path().join("seq.jsonl");
    pairsim(&["run", "--batch", &scenario("six.json"), "--seed", "42", "--out", sequential.to_str().unwrap()]);
    let strip = |p: &Path| -> Vec<_> { EventLog::load(p).unwrap().records().iter().map(|r| r.without_wall_time()).collect() };
    assert_eq!(strip(&log_path), strip(&sequential));

    for format in ["csv", "json", "svg_time", "svg_errors"] {
        let (out_path, out) = path(dir.path(), &format!("report.{format}"));
        let r = pairsim(&["report", "--in", &log, "--format", format, "--out", &out]);
        assert_eq!(r.status.code(), Some(0), "{format}: {}", stderr(&r));
        assert!(!std::fs::read(out_path).unwrap().is_empty());
    }
    let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "header plus three methods:\n{csv}");
}

#[test]
fn report_rejects_empty_logs_and_unknown_formats() {
    let dir = tempfile::tempdir().unwrap();
    let (empty_path, empty) = path(dir.path(), "empty.jsonl");
    std::fs::write(&empty_path, "").unwrap();
    let (_, out) = path(dir.path(), "out");
    let r = pairsim(&["report", "--in", &empty, "--format", "csv", "--out", &out]);
    assert_eq!(r.status.code(), Some(1));
    assert!(stderr(&r).contains("no trials"), "{}", stderr(&r));

    let (log_path, log) = path(dir.path(), "log.jsonl");
    pairsim(&["run", "--batch", &scenario("six.json"), "--out", &log]);
    assert!(log_path.exists());
    assert_eq!(pairsim(&["report", "--in", &log, "--format", "pdf", "--out", &out]).status.code(), Some(1));
}

#[test]
fn interactive_scenarios_cannot_run_headless() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out) = path(dir.path(), "x.jsonl");
    let r = pairsim(&["run", "--batch", &scenario("live_d2b.json"), "--out", &out]);
    assert_eq!(r.status.code(), Some(1), "{}", stderr(&r));
}

#[test]
fn eavesdropping_relay_needs_an_oob_tap() {
    let r = pairsim(&["mitm", "--listen", "0", "--forward", "127.0.0.1:1", "--attack", "oob_eavesdrop"]);
    assert_eq!(r.status.code(), Some(1));
    let r = pairsim(&["mitm", "--listen", "0", "--forward", "127.0.0.1:1", "--attack", "teleport"]);
    assert_eq!(r.status.code(), Some(1));
}
