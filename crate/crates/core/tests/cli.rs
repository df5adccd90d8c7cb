use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn cbdt(args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cbdt"));
    for (k, _) in std::env::vars() {
        if k.starts_with("CBDT_") {
            cmd.env_remove(k);
        }
    }
    cmd.args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn config(dir: &Path, jobs: usize) -> String {
    let path = dir.join("cbdt.toml");
    std::fs::write(
        &path,
        format!("[adapter]\nkind = \"simulator\"\nhistory_jobs = {jobs}\n"),
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn backfill_respects_the_limit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 250);
    let store = dir.path().join("store");
    let out = ok(&cbdt(&[
        "backfill",
        "-c",
        &cfg,
        "--store",
        path(&store),
        "--projects",
        "1",
        "--limit",
        "100",
    ]));
    let summary: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(summary["stored"], 100);

    let again = ok(&cbdt(&[
        "backfill",
        "-c",
        &cfg,
        "--store",
        path(&store),
        "--projects",
        "1",
        "--limit",
        "100",
    ]));
    let again: Value = serde_json::from_str(&again).unwrap();
    assert_eq!(
        (again["stored"].as_u64(), again["ignored"].as_u64()),
        (Some(0), Some(100))
    );
}

#[test]
fn export_then_replay_reproduces_the_store() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), 80);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&cbdt(&["backfill", "-c", &cfg, "--store", path(&a)]));
    let dump = dir.path().join("jobs.ndjson");
    ok(&cbdt(&[
        "export",
        "--store",
        path(&a),
        "--out",
        path(&dump),
    ]));
    let lines = std::fs::read_to_string(&dump).unwrap().lines().count();
    assert!(lines > 0);

    let replayed: Value = serde_json::from_str(&ok(&cbdt(&[
        "replay",
        "--store",
        path(&b),
        "--file",
        path(&dump),
    ])))
    .unwrap();
    assert_eq!(replayed["events"], lines);
    assert_eq!(replayed["jobs_stored"], lines);
    let copy = dir.path().join("copy.ndjson");
    ok(&cbdt(&[
        "export",
        "--store",
        path(&b),
        "--out",
        path(&copy),
    ]));
    assert_eq!(
        std::fs::read_to_string(&dump).unwrap(),
        std::fs::read_to_string(&copy).unwrap()
    );
}

#[test]
fn metrics_on_an_empty_store() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("empty");
    let args = [
        "metrics",
        "--store",
        path(&store),
        "--from",
        "2024-01-01T00:00:00Z",
        "--to",
        "2024-01-03T00:00:00Z",
    ];
    let table = ok(&cbdt(&args));
    assert!(!table.is_empty());
    let mut json_args = args.to_vec();
    json_args.push("--json");
    let series: Value = serde_json::from_str(&ok(&cbdt(&json_args))).unwrap();
    let windows = series.as_array().unwrap();
    assert_eq!(windows.len(), 2);
    assert!(windows.iter().all(|w| w["executions_frequency"] == 0));
}

#[test]
fn exit_codes() {
    let missing = cbdt(&["metrics", "--from", "2024-01-01T00:00:00Z"]);
    assert_eq!(missing.status.code(), Some(1));
    let envelope: Value = serde_json::from_slice(&missing.stderr).unwrap();
    assert_eq!(envelope["code"], "USAGE");

    let inverted = cbdt(&[
        "metrics",
        "--from",
        "2024-01-03T00:00:00Z",
        "--to",
        "2024-01-01T00:00:00Z",
    ]);
    assert_eq!(inverted.status.code(), Some(1));

    let unreachable = cbdt(&["backfill", "--target", "http://127.0.0.1:1"]);
    assert_eq!(unreachable.status.code(), Some(2));

    let no_dump = cbdt(&["replay", "--file", "/nonexistent/jobs.ndjson"]);
    assert_eq!(no_dump.status.code(), Some(3));

    ok(&cbdt(&["--help"]));
}
