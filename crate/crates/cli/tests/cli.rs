use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use peerfeedback_cli::run_cli;
use peerfeedback_core::eval::EvalEntry;
use peerfeedback_core::io::read_jsonl;
use peerfeedback_core::selfimprove::{SftRecord, UtteranceSamples};
use tempfile::TempDir;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

/// Fresh copy of the fixture directory.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    for entry in fs::read_dir(fixtures()).unwrap() {
        let entry = entry.unwrap();
        if entry.file_type().unwrap().is_file() {
            fs::copy(entry.path(), dir.path().join(entry.file_name())).unwrap();
        }
    }
    dir
}

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["peerfeedback", "--log-level", "off"];
    full.extend_from_slice(args);
    run_cli(full)
}

fn p(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_string_lossy().into_owned()
}

/// Runs ingest and segment; returns (test split, segments).
fn prepare(dir: &TempDir) -> (String, String) {
    let code = run(&[
        "ingest",
        "--in",
        &p(dir, "conversations.jsonl"),
        "--out",
        &p(dir, "clean.jsonl"),
        "--report",
        &p(dir, "scrub.json"),
        "--split",
        "annotate=2,prefs=2,test=2",
        "--split-dir",
        &p(dir, "splits"),
    ]);
    assert_eq!(code, 0);
    let code = run(&[
        "segment",
        "--in",
        &p(dir, "clean.jsonl"),
        "--out",
        &p(dir, "segments.jsonl"),
        "--profile",
        &p(dir, "backend.toml"),
    ]);
    assert_eq!(code, 0);
    (p(dir, "splits/test.jsonl"), p(dir, "segments.jsonl"))
}

fn write_profile(dir: &TempDir, name: &str, script: &str) -> String {
    fs::write(dir.path().join(format!("{name}.json")), script).unwrap();
    let toml = format!("kind = \"mock\"\nmock_script = \"{name}.json\"\nembedding_dim = 64\nretries = 1\nbackoff_ms = 0\n");
    fs::write(dir.path().join(format!("{name}.toml")), toml).unwrap();
    p(dir, &format!("{name}.toml"))
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_peerfeedback");
    assert_eq!(Command::new(bin).arg("--help").output().unwrap().status.code(), Some(0));
    assert_eq!(Command::new(bin).arg("--version").output().unwrap().status.code(), Some(0));
    assert_eq!(Command::new(bin).arg("nonsense").output().unwrap().status.code(), Some(1));
    let out = Command::new(bin).args(["stats", "--in", "/nonexistent/annotated.jsonl"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("annotated file not found"));
}

#[test]
fn pairs_without_segments_names_the_artifact() {
    let dir = workspace();
    prepare(&dir);
    let out = Command::new(env!("CARGO_BIN_EXE_peerfeedback"))
        .args(["selfimprove", "pairs", "--in", &p(&dir, "clean.jsonl"), "--profile", &p(&dir, "backend.toml")])
        .args(["--out", &p(&dir, "pairs.jsonl")])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("segments"), "{stderr}");
    assert!(!dir.path().join("pairs.jsonl").exists());

    let code = run(&[
        "selfimprove",
        "pairs",
        "--in",
        &p(&dir, "clean.jsonl"),
        "--segments",
        &p(&dir, "no_such_segments.jsonl"),
        "--profile",
        &p(&dir, "backend.toml"),
        "--out",
        &p(&dir, "pairs.jsonl"),
    ]);
    assert_eq!(code, 1);
}

#[test]
fn invalid_data_exits_2() {
    let dir = workspace();
    fs::write(dir.path().join("bad.jsonl"), "{\"id\": \"x\", \"utterances\": 3}\n").unwrap();
    assert_eq!(run(&["stats", "--in", &p(&dir, "bad.jsonl")]), 2);
    // A helper index pointing at a seeker turn.
    let bad = r#"{"id":"x","source_tag":"t","utterances":[{"index":0,"speaker":"seeker","text":"hi"}],"feedback":{"0":{"appropriate":true}}}"#;
    fs::write(dir.path().join("bad2.jsonl"), format!("{bad}\n")).unwrap();
    assert_eq!(run(&["stats", "--in", &p(&dir, "bad2.jsonl")]), 2);
    assert_eq!(
        run(&[
            "ingest",
            "--in",
            &p(&dir, "conversations.jsonl"),
            "--out",
            &p(&dir, "c.jsonl"),
            "--report",
            &p(&dir, "r.json"),
            "--split",
            "a=5,b=5"
        ]),
        2
    );
}

#[test]
fn embedding_outage_exits_3() {
    let dir = workspace();
    prepare(&dir);
    let down = write_profile(&dir, "down", r#"{"outage": {"after_calls": 0}}"#);
    let code = run(&["segment", "--in", &p(&dir, "clean.jsonl"), "--out", &p(&dir, "s2.jsonl"), "--profile", &down]);
    assert_eq!(code, 3);
    assert!(!dir.path().join("s2.jsonl").exists());
}

#[test]
fn eval_outage_checkpoints_and_resumes() {
    let dir = workspace();
    let (test, segs) = prepare(&dir);
    let flaky = write_profile(
        &dir,
        "flaky",
        &fs::read_to_string(dir.path().join("baseline.json")).unwrap().replacen('{', "{\"outage\": {\"after_calls\": 300},", 1),
    );
    let scores = p(&dir, "scores.jsonl");
    let args = |profile: &str, resume: bool| {
        let mut a = vec![
            "eval".to_string(),
            "score".into(),
            "--in".into(),
            test.clone(),
            "--segments".into(),
            segs.clone(),
            "--k".into(),
            "40".into(),
            "--profile".into(),
            profile.into(),
            "--out".into(),
            scores.clone(),
        ];
        if resume {
            a.push("--resume".into());
        }
        a
    };
    let with_bin = |a: Vec<String>| {
        let mut full = vec!["peerfeedback".to_string(), "--log-level".into(), "off".into()];
        full.extend(a);
        run_cli(full)
    };
    assert_eq!(with_bin(args(&flaky, false)), 4);
    let partial: Vec<EvalEntry> = read_jsonl(Path::new(&scores)).unwrap();
    assert!(!partial.is_empty() && partial.len() < 400, "{} checkpointed", partial.len());
    assert_eq!(partial.len() % 40, 0, "only whole utterances are checkpointed");

    assert_eq!(with_bin(args(&p(&dir, "baseline.toml"), true)), 0);
    let resumed = fs::read(&scores).unwrap();

    let fresh = p(&dir, "fresh.jsonl");
    let mut a = args(&p(&dir, "baseline.toml"), false);
    *a.last_mut().unwrap() = fresh.clone();
    assert_eq!(with_bin(a), 0);
    assert_eq!(resumed, fs::read(&fresh).unwrap());
}

#[test]
fn annotate_chunk_failure_writes_partial() {
    let dir = workspace();
    prepare(&dir);
    let script = r#"{
        "generations": [{"conversation": "demo-01", "chunk": 0, "responses": [{"error": "unavailable"}]}]
    }"#;
    let profile = write_profile(&dir, "chunkfail", script);
    let code = run(&[
        "annotate",
        "--in",
        &p(&dir, "clean.jsonl"),
        "--segments",
        &p(&dir, "segments.jsonl"),
        "--template",
        &p(&dir, "prompt.tmpl"),
        "--profile",
        &profile,
        "--out",
        &p(&dir, "annotated.jsonl"),
        "--partial-out",
        &p(&dir, "partial.jsonl"),
    ]);
    assert_eq!(code, 4);
    assert!(!dir.path().join("annotated.jsonl").exists());
    let partial: Vec<serde_json::Value> = read_jsonl(&dir.path().join("partial.jsonl")).unwrap();
    assert_eq!(partial.len(), 6);
    // demo-01 has helper turns 1..=11; chunk 0 keeps the first five and
    // chunk 1 keeps only turn 11.
    let demo01 = partial.iter().find(|v| v["id"] == "demo-01").unwrap();
    let keys: Vec<&String> = demo01["feedback"].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["11"]);
    let full = partial.iter().find(|v| v["id"] == "demo-02").unwrap();
    assert_eq!(full["feedback"].as_object().unwrap().len(), 5);
    let failures = fs::read_to_string(dir.path().join("partial.failures.json")).unwrap();
    assert!(failures.contains("demo-01"));
}

#[test]
fn sft_modes_from_generations() {
    let dir = workspace();
    let (test, segs) = prepare(&dir);
    let code = run(&[
        "selfimprove",
        "sample",
        "--in",
        &test,
        "--segments",
        &segs,
        "--n",
        "4",
        "--score",
        "--profile",
        &p(&dir, "backend.toml"),
        "--out",
        &p(&dir, "gens.jsonl"),
    ]);
    assert_eq!(code, 0);
    let gens: Vec<UtteranceSamples> = read_jsonl(&dir.path().join("gens.jsonl")).unwrap();
    for mode in ["gens", "best"] {
        let out = p(&dir, &format!("{mode}.sft.jsonl"));
        assert_eq!(run(&["selfimprove", "sft", "--mode", mode, "--gens", &p(&dir, "gens.jsonl"), "--out", &out]), 0);
        let records: Vec<SftRecord> = read_jsonl(Path::new(&out)).unwrap();
        assert_eq!(records.len(), gens.len());
    }
    // Expert mode needs annotations.
    assert_eq!(run(&["selfimprove", "sft", "--mode", "expert", "--out", &p(&dir, "x.jsonl")]), 1);
    assert_eq!(run(&["selfimprove", "sft", "--mode", "bogus", "--out", &p(&dir, "x.jsonl")]), 1);
}

#[test]
fn report_from_cli_scores() {
    let dir = workspace();
    let (test, segs) = prepare(&dir);
    for sys in ["baseline", "improved"] {
        let code = run(&[
            "eval",
            "score",
            "--in",
            &test,
            "--segments",
            &segs,
            "--k",
            "20",
            "--profile",
            &p(&dir, &format!("{sys}.toml")),
            "--out",
            &p(&dir, &format!("{sys}.scores.jsonl")),
        ]);
        assert_eq!(code, 0);
    }
    let scores = format!("baseline={},improved={}", p(&dir, "baseline.scores.jsonl"), p(&dir, "improved.scores.jsonl"));
    assert_eq!(run(&["eval", "report", "--scores", &scores, "--baseline", "baseline", "--out", &p(&dir, "rep.json")]), 0);
    for ext in ["rep.json", "rep.txt", "rep.hist.csv"] {
        assert!(dir.path().join(ext).exists(), "{ext}");
    }
    let csv = fs::read_to_string(dir.path().join("rep.hist.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("bin_lo,bin_hi,baseline,improved"));
    assert_eq!(csv.lines().count(), 21);
    // Unknown baseline is a validation error.
    assert_eq!(run(&["eval", "report", "--scores", &scores, "--baseline", "nope", "--out", &p(&dir, "r2")]), 2);
    assert_eq!(run(&["eval", "report", "--scores", "justapath", "--baseline", "x", "--out", &p(&dir, "r3")]), 1);
}

#[test]
fn stats_writes_json() {
    let dir = workspace();
    assert_eq!(run(&["stats", "--in", &p(&dir, "mini_annotated.jsonl"), "--out", &p(&dir, "stats.json")]), 0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("stats.json")).unwrap()).unwrap();
    assert_eq!(v["n_sessions"], 2);
    assert_eq!(v["n_utterances"], 5);
}

#[test]
fn pipeline_stage_selection_and_log() {
    let dir = workspace();
    let cfg = p(&dir, "pipeline.toml");
    assert_eq!(run(&["run", "--config", &cfg, "--stage", "ingest", "--stage", "segment"]), 0);
    let out = dir.path().join("out");
    assert!(out.join("segments.jsonl").exists());
    assert!(!out.join("annotated.jsonl").exists());
    // Later stages without their inputs fail with a usage error.
    let fresh = workspace();
    assert_eq!(run(&["run", "--config", &p(&fresh, "pipeline.toml"), "--stage", "pairs"]), 1);

    assert_eq!(run(&["run", "--config", &cfg, "--stage", "annotate"]), 0);
    let log = fs::read_to_string(out.join("run_log.jsonl")).unwrap();
    let stages: Vec<String> = log
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["stage"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(stages, ["ingest", "segment", "annotate"]);

    fs::write(dir.path().join("broken.toml"), "seed = 1\nout_dir = \"o\"\n").unwrap();
    assert_eq!(run(&["run", "--config", &p(&dir, "broken.toml")]), 2);
    assert_eq!(run(&["run", "--config", &p(&dir, "missing.toml")]), 1);
}
