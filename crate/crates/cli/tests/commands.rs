//! Drives the `irag` binary over the toy corpus in a temp directory.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn core_fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn irag(index: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_irag")).arg("--index").arg(index).args(args).output().expect("spawn irag")
}

fn ok(out: Output) -> String {
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(out.status.success(), "stdout:\n{stdout}\nstderr:\n{}", String::from_utf8_lossy(&out.stderr));
    stdout
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Ingested and indexed toy corpus.
fn indexed() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let index = dir.path().join("index");
    let corpus = core_fixture("toy_corpus.jsonl");
    let out = ok(irag(&index, &["ingest", "--input", s(&corpus)]));
    assert!(out.starts_with("ingested 12 documents into 12 chunks"), "{out}");
    let out = ok(irag(&index, &["build-index"]));
    assert!(out.contains("hashing-64"), "{out}");
    (dir, index)
}

#[test]
fn search_modes_print_a_tool_response() {
    let (_dir, index) = indexed();
    let out = ok(irag(&index, &["search", "1976", "--mode", "exact", "--scale", "2"]));
    assert!(out.starts_with("<tool_response>"));
    assert!(out.contains("### adjust_scale"));
    let first = out.lines().find(|l| l.starts_with("[1] ")).unwrap();
    assert!(first.contains("\"doc_id\":\"jaws_of_death\""), "{first}");
    assert!(!out.contains("[2] "));

    let out = ok(irag(&index, &["search", "release date of The Jaws of Death", "--exclude", "hound_of_death"]));
    assert!(!out.contains("\"doc_id\":\"hound_of_death\""));

    let out = ok(irag(&index, &["search", "The Jaws of Death", "--mode", "entity", "--query", "release year"]));
    assert!(out.contains("### entity_match"));
    assert!(out.contains("1976"));
}

#[test]
fn agent_run_writes_log_and_trajectory() {
    let (dir, index) = indexed();
    let log = dir.path().join("out/log.jsonl");
    let save = dir.path().join("out/traj.jsonl");
    let script = core_fixture("toy_scripts.json");
    let q = "Which film was released first, The Jaws of Death or Failure to Launch?";
    let out =
        ok(irag(&index, &["run-agent", "--question", q, "--script", s(&script), "--log", s(&log), "--save", s(&save)]));
    assert_eq!(out, "steps: 4\nanswer: The Jaws of Death\n");
    let lines = std::fs::read_to_string(&log).unwrap();
    let rows: Vec<Value> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    // four steps, then the episode summary
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[4]["steps"], 4);
    assert_eq!(rows[4]["final_answer"], "The Jaws of Death");
    let saved: Value = serde_json::from_str(std::fs::read_to_string(&save).unwrap().trim()).unwrap();
    assert_eq!(saved["question"], q);
}

#[test]
fn failed_episode_exits_nonzero() {
    let (_dir, index) = indexed();
    let script = core_fixture("toy_scripts.json");
    let out = irag(&index, &["run-agent", "--question", "Unscripted?", "--script", s(&script)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no script matches"));
}

#[test]
fn evaluate_reports_per_dataset() {
    let (dir, index) = indexed();
    let script = core_fixture("toy_scripts.json");
    let dataset = core_fixture("toy_qa.jsonl");
    let csv = ok(irag(
        &index,
        &["evaluate", "--dataset", s(&dataset), "--script", s(&script), "--format", "csv", "--workers", "3"],
    ));
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("dataset,num_examples,em,f1"));
    assert!(rows[3].starts_with("overall,5,100.0,100.0,"), "{}", rows[3]);

    let report = dir.path().join("report.txt");
    ok(irag(&index, &["evaluate", "--dataset", s(&dataset), "--script", s(&script), "--out", s(&report)]));
    let text = std::fs::read_to_string(&report).unwrap();
    assert!(text.contains("toy_multihop") && text.contains("overall"), "{text}");
}

#[test]
fn synthesize_keeps_only_correct_runs_and_reward_agrees() {
    let (dir, index) = indexed();
    let dataset = fixture("synth_qa.jsonl");
    let script = fixture("workflow_scripts.json");
    let sft = dir.path().join("sft.jsonl");
    let trajs = dir.path().join("all.jsonl");
    let out = ok(irag(
        &index,
        &["synthesize", "--dataset", s(&dataset), "--script", s(&script), "--out", s(&sft), "--save", s(&trajs)],
    ));
    assert!(out.starts_with("exported 2 of 3"), "{out}");
    let records: Vec<Value> =
        std::fs::read_to_string(&sft).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 2);
    for r in &records {
        let text = r.to_string();
        assert!(!text.contains("Death Valley"), "wrong answer leaked into SFT: {text}");
    }

    let csv = ok(irag(&index, &["reward", "--trajectories", s(&trajs), "--gold", s(&dataset)]));
    let totals: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth_back(1).unwrap()).collect();
    assert_eq!(totals, ["1", "1", "0"]);
}

#[test]
fn reward_rejects_unknown_questions() {
    let (dir, index) = indexed();
    let script = core_fixture("toy_scripts.json");
    let save = dir.path().join("t.jsonl");
    ok(irag(
        &index,
        &["run-agent", "--question", "Miami is a city in which US state?", "--script", s(&script), "--save", s(&save)],
    ));
    let gold = fixture("synth_qa.jsonl");
    let wrong_gold = core_fixture("toy_qa.jsonl");
    ok(irag(&index, &["reward", "--trajectories", s(&save), "--gold", s(&gold)]));
    ok(irag(&index, &["reward", "--trajectories", s(&save), "--gold", s(&wrong_gold)]));

    let other = dir.path().join("other.jsonl");
    std::fs::write(&other, "{\"question\": \"Something else?\", \"answers\": [\"x\"], \"dataset\": \"d\"}\n").unwrap();
    let out = irag(&index, &["reward", "--trajectories", s(&save), "--gold", s(&other)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no gold answers"));
}

#[test]
fn bad_config_and_missing_index_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[session]\nscale = 0\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_irag")).arg("--config").arg(&cfg).arg("build-index").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: invalid config"));

    let out = irag(&dir.path().join("nothing"), &["search", "x"]);
    assert!(!out.status.success());
}

#[test]
fn config_file_sets_session_defaults() {
    let (dir, index) = indexed();
    let cfg = dir.path().join("irag.toml");
    std::fs::write(&cfg, format!("[index]\ndir = {:?}\n[session]\nscale = 1\n", s(&index))).unwrap();
    let out =
        Command::new(env!("CARGO_BIN_EXE_irag")).arg("--config").arg(&cfg).args(["search", "Miami"]).output().unwrap();
    let out = ok(out);
    assert!(out.contains("\"scale_n\":1"));
    assert_eq!(out.lines().filter(|l| l.starts_with('[')).count(), 1);
}
