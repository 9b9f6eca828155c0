use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn iterchat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iterchat")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = iterchat(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn explode_then_replay_recovers_final_states() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("records.jsonl");
    ok(&["convert", "explode", "--in", s(&fixture("dialogs.jsonl")), "--out", s(&records)]);
    let exploded = lines(&records);
    assert_eq!(exploded.len(), 5);
    assert_eq!(exploded[0]["record_id"], "d1-t1");
    let replayed: Vec<Value> =
        ok(&["convert", "replay", "--in", s(&records)]).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(replayed.len(), 2);
    assert_eq!(replayed[1]["dialogue_id"], "d2");
    assert_eq!(replayed[1]["final_state"], serde_json::json!({"brand": ["acme"], "color": ["blue", "black"]}));
}

#[test]
fn gold_scored_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let records = dir.path().join("records.jsonl");
    ok(&["convert", "explode", "--in", s(&fixture("dialogs.jsonl")), "--out", s(&records)]);
    let report: Value = serde_json::from_str(&ok(&["eval", "--pred", s(&records), "--gold", s(&records)])).unwrap();
    assert_eq!(report["corpus"]["em_rate"], 1.0);
    assert_eq!(report["corpus"]["mean_fed"], 0.0);
    assert_eq!(report["corpus"]["record_count"], 5);
    let table = ok(&["eval", "--pred", s(&records), "--gold", s(&records), "--format", "table"]);
    assert!(table.contains("EM=1.0000"), "{table}");
}

#[test]
fn extract_with_echo_backend_reproduces_dialogue_states() {
    let dir = tempfile::tempdir().unwrap();
    let schema = fixture("shop.json");
    let dialogs = fixture("dialogs.jsonl");
    let pred = dir.path().join("pred.jsonl");
    for mode in ["iterchat", "multi-turn"] {
        ok(&[
            "extract",
            "--mode",
            mode,
            "--schema",
            s(&schema),
            "--in",
            s(&dialogs),
            "--backend",
            "echo",
            "--out",
            s(&pred),
        ]);
        let report: Value = serde_json::from_str(&ok(&["eval", "--pred", s(&pred), "--gold", s(&dialogs)])).unwrap();
        assert_eq!(report["dialogue_final"]["corpus"]["em_rate"], 1.0, "{mode}");
    }
}

#[test]
fn generate_is_reproducible_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    let schema = fixture("hotel.json");
    let config = fixture("sampler.json");
    for (out, jobs) in [(&a, "1"), (&b, "4")] {
        let stats: Value = serde_json::from_str(&ok(&[
            "--seed",
            "7",
            "--jobs",
            jobs,
            "generate",
            "--schema",
            s(&schema),
            "--config",
            s(&config),
            "--out",
            s(out),
        ]))
        .unwrap();
        assert_eq!(stats["generated"], 50);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = dir.path().join("c.jsonl");
    ok(&["--seed", "8", "generate", "--schema", s(&schema), "--config", s(&config), "--out", s(&c)]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
}

#[test]
fn ingest_reports_dropped_keys() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("dialogs.jsonl");
    let summary: Value = serde_json::from_str(&ok(&[
        "convert",
        "ingest",
        "--in",
        s(&fixture("multiwoz.json")),
        "--mapping",
        s(&fixture("mapping.json")),
        "--schema",
        s(&fixture("hotel.json")),
        "--out",
        s(&out),
    ]))
    .unwrap();
    assert_eq!(summary["dialogues"], 1);
    assert_eq!(summary["warning_count"], 1);
    assert_eq!(lines(&out).len(), 1);
}

#[test]
fn schema_validate_summarizes() {
    let summary: Value =
        serde_json::from_str(&ok(&["schema", "validate", "--schema", s(&fixture("shop.json"))])).unwrap();
    assert_eq!(summary["slot_count"], 3);
    assert_eq!(summary["valid"], true);
}

#[test]
fn runtime_errors_exit_one_with_json_on_stderr() {
    let out = iterchat(&["convert", "explode", "--in", "/definitely/missing.jsonl", "--out", "/tmp/x.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["detail"].as_str().unwrap().contains("missing.jsonl"));
    assert!(err["error"].is_string());

    let out = iterchat(&["--jobs", "0", "schema", "validate", "--schema", s(&fixture("shop.json"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(iterchat(&["generate"]).status.code(), Some(2));
    assert_eq!(iterchat(&["extract", "--mode", "sideways"]).status.code(), Some(2));
    assert_eq!(iterchat(&["frobnicate"]).status.code(), Some(2));
}
