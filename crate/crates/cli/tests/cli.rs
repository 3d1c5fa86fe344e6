use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

const BUBBLE_SORT: &str = "def bubble_sort(arr):\n    n = len(arr)\n\n    for i in range(n):\n        for j in range(0, n-i-1):\n            if arr[j] > arr[j+1]:\n                arr[j], arr[j+1] = arr[j+1], arr[j]\n\n    return arr\n";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_stepwise"));
    // keep ambient configuration out of the tests
    for (k, _) in std::env::vars() {
        if k.starts_with("STEPWISE_") {
            c.env_remove(k);
        }
    }
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_and_bad_flags() {
    assert!(run(&["--help"]).status.success());
    for sub in ["split-data", "train", "eval", "build-index", "segment", "session", "serve", "fixture"] {
        let out = run(&[sub, "--help"]);
        assert!(out.status.success(), "{sub}");
    }
    let out = run(&["train", "--no-such-flag"]);
    assert!(!out.status.success());
    assert!(!run(&["bogus"]).status.success());
}

#[test]
fn bad_path_fails_with_message_on_stderr() {
    let out = run(&["split-data", "--corpus", "/definitely/not/here.jsonl"]);
    assert!(!out.status.success());
    assert!(out.stdout.is_empty());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("error:") && err.contains("/definitely/not/here.jsonl"), "{err}");
}

#[test]
fn empty_corpus_gives_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("empty.jsonl");
    std::fs::write(&corpus, "").unwrap();
    let out = run_ok(&["--format", "structured", "split-data", "--corpus", p(&corpus), "--out-dir", p(dir.path())]);
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["records"], 0);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest, serde_json::json!({}));
}

#[test]
fn planted_fixture_splits_off_a_small_local_set() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("planted.jsonl");
    run_ok(&["fixture", "--kind", "planted", "--size", "100", "--seed", "3", "--out", p(&corpus)]);
    let args = ["--format", "structured", "split-data", "--corpus", p(&corpus), "--out-dir", p(dir.path()), "--seed", "3"];
    let out = run_ok(&args);
    let v: Value = serde_json::from_str(&out).unwrap();
    let frac = v["local_fraction"].as_f64().unwrap();
    assert!((0.01..=0.05).contains(&frac), "{frac}");
    // every local record is one half of a planted pair
    let planted = stepwise_core::fixtures::planted_overlap_corpus(98, 2, 3).planted;
    for id in v["local_ids"].as_array().unwrap() {
        let id = id.as_str().unwrap();
        assert!(planted.iter().any(|(g, q)| g == id || q == id), "{id}");
    }
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.as_object().unwrap().len(), 100);
    assert!(dir.path().join("heatmap.csv").exists());
    assert_eq!(run_ok(&args), out, "deterministic under --seed");
}

#[test]
fn env_mirrors_flags() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("planted.jsonl");
    run_ok(&["fixture", "--kind", "planted", "--size", "40", "--out", p(&corpus)]);
    let out = bin()
        .args(["split-data"])
        .env("STEPWISE_CORPUS", &corpus)
        .env("STEPWISE_OUT_DIR", dir.path())
        .env("STEPWISE_FORMAT", "structured")
        .env("STEPWISE_THRESHOLD", "1.5")
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("1.5"));
}

#[test]
fn zero_epoch_training_keeps_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("cur.jsonl");
    run_ok(&["fixture", "--kind", "curriculum", "--size", "10", "--out", p(&corpus)]);
    let out = run_ok(&["train", "--corpus", p(&corpus), "--out-dir", p(dir.path()), "--epochs", "0", "--tau", "0", "--lambda", "0"]);
    assert!(out.contains("[phase 1]") && out.contains("[prune]") && out.contains("[phase 3]"));
    let init = stepwise_core::Model::load(&dir.path().join("init.ckpt")).unwrap();
    let last = stepwise_core::Model::load(&dir.path().join("llm3.ckpt")).unwrap();
    assert_eq!(init.param_count(), last.param_count());
    assert_eq!(init.base_checksums(), last.base_checksums());
    let probe = ["U: Can you help me write bubble sort?\n"];
    let ex = init.examples_for(probe.iter().map(|s| s.to_string()));
    let (a, b) = (init.logits(&ex), last.logits(&ex));
    assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
}

#[test]
fn train_report_orders_phases_around_the_prune_step() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("cur.jsonl");
    run_ok(&["fixture", "--kind", "curriculum", "--size", "10", "--out", p(&corpus)]);
    let out = run_ok(&["train", "--corpus", p(&corpus), "--out-dir", p(dir.path()), "--epochs", "2"]);
    let pos = |s: &str| out.find(s).unwrap_or_else(|| panic!("{s} missing from\n{out}"));
    assert!(pos("[phase 1]") < pos("[phase 2]") && pos("[phase 2]") < pos("[prune]") && pos("[prune]") < pos("[phase 3]"));
    for f in ["llm1.ckpt", "llm2.ckpt", "llm3.ckpt"] {
        assert!(dir.path().join(f).exists());
    }
    let out = run_ok(&["train", "--corpus", p(&corpus), "--out-dir", p(dir.path()), "--epochs", "1", "--single-phase"]);
    assert!(out.contains("[single phase]"));
    assert!(dir.path().join("single.ckpt").exists());
}

#[test]
fn eval_needs_checkpoints_unless_mock_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["eval", "--models", p(dir.path()), "--variant", "no-phase3", "--seeds", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("llm2"));
    let args = ["--format", "structured", "eval", "--mock-only", "--seeds", "3", "--variant", "full,no-filter"];
    let first = run_ok(&args);
    let v: Value = serde_json::from_str(&first).unwrap();
    let full = &v["variants"][0];
    assert_eq!(full["variant"], "full");
    assert_eq!(full["cooperative"]["leak_rate"], 0.0);
    assert_eq!(full["cooperative"]["subtask_coverage"], 1.0);
    let nf = &v["variants"][1];
    assert!(nf["adversarial"]["leak_rate"].as_f64().unwrap() > full["adversarial"]["leak_rate"].as_f64().unwrap());
    assert_eq!(run_ok(&args), first);
    assert!(!run(&["eval", "--mock-only", "--variant", "nonsense"]).status.success());
}

#[test]
fn segment_prints_the_plan() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("bs.py");
    std::fs::write(&src, BUBBLE_SORT).unwrap();
    let out = run_ok(&["segment", p(&src)]);
    assert_eq!(out.lines().count(), 6);
    assert!(out.starts_with("1. [function_definition]"));
    let v: Value = serde_json::from_str(&run_ok(&["--format", "structured", "segment", p(&src)])).unwrap();
    let tags: Vec<&str> = v["subtasks"].as_array().unwrap().iter().map(|s| s["tag"].as_str().unwrap()).collect();
    assert_eq!(tags, ["function_definition", "loop", "loop", "conditional", "swap", "return"]);
    std::fs::write(&src, "for x in\n").unwrap();
    assert!(!run(&["segment", p(&src)]).status.success());
}

#[test]
fn build_index_then_session_over_stdin() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("cur.jsonl");
    run_ok(&["fixture", "--kind", "curriculum", "--size", "10", "--out", p(&corpus)]);
    let index = dir.path().join("kb.bin");
    let out = run_ok(&["build-index", "--corpus", p(&corpus), "--out", p(&index), "--clusters", "4"]);
    assert!(out.contains("entries 40"));
    let src = dir.path().join("bs.py");
    std::fs::write(&src, BUBBLE_SORT).unwrap();
    let mut child = bin()
        .args(["--format", "structured", "session", "--task", p(&src), "--index", p(&index), "--backend", "adversarial"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let script = "Can you help me write bubble sort?\n".to_string() + &"done, what next?\n".repeat(12);
    child.stdin.take().unwrap().write_all(script.as_bytes()).unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let turns: Vec<Value> = String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(!turns.is_empty());
    assert!(turns.iter().all(|t| t["verdict"]["class"] != "full_answer"));
}
