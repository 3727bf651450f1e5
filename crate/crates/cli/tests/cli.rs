//! End-to-end checks of the command-line surface: exit codes, determinism,
//! file outputs. Uses deliberately tiny configurations so the whole pipeline
//! (train target, train draft, decode, bench, analyze) runs in seconds.

use std::path::Path;
use std::process::{Command, Output};

fn sparrow(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparrow"))
        .args(args)
        .current_dir(dir)
        .env_remove("SPARROW_SEED")
        .output()
        .expect("run sparrow")
}

/// Tiny-model overrides shared by the pipeline tests.
fn tiny_overrides(out: &str) -> Vec<String> {
    [
        ("model.num_layers", "4"),
        ("model.hidden_dim", "16"),
        ("model.num_heads", "2"),
        ("model.vocab_size", "32"),
        ("model.max_positions", "256"),
        ("model.visual_alphabet", "4"),
        ("task.informative", "8"),
        ("task.queries", "4"),
        ("train_target.curriculum", "4:8"),
        ("train_target.batch_size", "2"),
        ("train_draft.examples", "6"),
        ("train_draft.batch_size", "3"),
        ("train_draft.stage1_epochs", "1"),
        ("train_draft.stage2_epochs", "1"),
        ("train_draft.l_vis", "8"),
        ("bench.l_vis_sweep", "8,16"),
        ("bench.prompts", "2"),
        ("bench.reps", "1"),
        ("decode.tree", "4-2-2"),
    ]
    .iter()
    .flat_map(|(k, v)| ["--set".to_string(), format!("{k}={v}")])
    .chain(["--out-dir".to_string(), out.to_string()])
    .collect()
}

fn run_tiny(dir: &Path, out: &str, cmd: &[&str]) -> Output {
    let mut args: Vec<String> = cmd.iter().map(|s| s.to_string()).collect();
    args.extend(tiny_overrides(out));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    sparrow(&refs, dir)
}

#[test]
fn missing_config_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = sparrow(&["train-target", "--config", "no_such_file.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.cfg"), "bogus.key = 1\n").unwrap();
    let out = sparrow(&["train-target", "--config", "bad.cfg"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_tree_triple_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("p.jsonl"), "{\"l_vis\": 8}\n").unwrap();
    let mut args = vec!["decode", "--prompt-file", "p.jsonl", "--tree", "0-4-8"];
    args.extend(["--set", "model.num_layers=4"]);
    let out = sparrow(&args, dir.path());
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn decode_without_checkpoints_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("p.jsonl"), "{\"l_vis\": 8}\n").unwrap();
    let out = run_tiny(dir.path(), "out", &["decode", "--prompt-file", "p.jsonl"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn seeded_training_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let res = run_tiny(dir.path(), out, &["train-target", "--seed", "7"]);
        assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    }
    let a = std::fs::read(dir.path().join("a/target.sprw")).unwrap();
    let b = std::fs::read(dir.path().join("b/target.sprw")).unwrap();
    assert_eq!(a, b, "checkpoints differ across identical seeded runs");
}

#[test]
fn full_tiny_pipeline_produces_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let run = |cmd: &[&str]| {
        let res = run_tiny(dir.path(), "out", cmd);
        assert!(
            res.status.success(),
            "{:?} failed: {}",
            cmd,
            String::from_utf8_lossy(&res.stderr)
        );
        res
    };
    run(&["train-target", "--seed", "3"]);
    run(&["train-draft", "--seed", "3"]);
    // Ablation arm: stage 2 disabled still succeeds.
    run(&["train-draft", "--seed", "3", "--stage2-epochs", "0"]);
    run(&["train-draft", "--seed", "3"]);

    std::fs::write(
        dir.path().join("p.jsonl"),
        "{\"prompt_id\": \"x\", \"l_vis\": 8, \"seed\": 5}\n{\"l_vis\": 16, \"seed\": 6}\n",
    )
    .unwrap();
    let dec = run(&["decode", "--prompt-file", "p.jsonl", "--method", "sparrow", "--seed", "3"]);
    let stdout = String::from_utf8_lossy(&dec.stdout);
    let lines: Vec<&str> = stdout.lines().filter(|l| l.starts_with('{')).collect();
    assert_eq!(lines.len(), 2);
    let rec: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(rec["prompt_id"], "x");
    assert!(rec["tau"].as_f64().unwrap() >= 1.0);
    assert!(rec["tokens"].as_array().is_some());
    assert!(rec["target_calls"].as_u64().unwrap() >= 1);

    // Greedy speculative output equals vanilla output token for token.
    run(&["decode", "--prompt-file", "p.jsonl", "--method", "vanilla", "--seed", "3"]);
    let vanilla = std::fs::read_to_string(dir.path().join("out/decode.jsonl")).unwrap();
    run(&["decode", "--prompt-file", "p.jsonl", "--method", "sparrow", "--seed", "3"]);
    let sparrow_out = std::fs::read_to_string(dir.path().join("out/decode.jsonl")).unwrap();
    let toks = |text: &str| -> Vec<serde_json::Value> {
        text.lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["tokens"].clone())
            .collect()
    };
    assert_eq!(toks(&vanilla), toks(&sparrow_out));

    run(&["bench", "--seed", "3"]);
    run(&["analyze", "--seed", "3"]);
    for file in
        ["table5.csv", "fig1a.csv", "bench.jsonl", "fig3a.csv", "fig3b.csv", "retention.csv"]
    {
        let path = dir.path().join("out").join(file);
        assert!(path.exists(), "{file} missing");
    }
    // fig3b has layers x heads data rows plus a header.
    let fig3b = std::fs::read_to_string(dir.path().join("out/fig3b.csv")).unwrap();
    assert_eq!(fig3b.lines().count(), 1 + 4 * 2);
    // table5 recomputed ratios match raw counters.
    let table5 = std::fs::read_to_string(dir.path().join("out/table5.csv")).unwrap();
    for line in table5.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        let tau: f64 = fields[3].parse().unwrap();
        let generated: f64 = fields[4].parse().unwrap();
        let calls: f64 = fields[5].parse().unwrap();
        assert!((tau - generated / calls).abs() < 1e-4, "table5 tau mismatch: {line}");
    }
}

#[test]
fn env_seed_fallback_is_used() {
    let dir = tempfile::tempdir().unwrap();
    let mut args: Vec<String> =
        ["train-target"].iter().map(|s| s.to_string()).collect();
    args.extend(tiny_overrides("env_a"));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let res = Command::new(env!("CARGO_BIN_EXE_sparrow"))
        .args(&refs)
        .current_dir(dir.path())
        .env("SPARROW_SEED", "11")
        .output()
        .unwrap();
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let mut args: Vec<String> =
        ["train-target", "--seed", "11"].iter().map(|s| s.to_string()).collect();
    args.extend(tiny_overrides("env_b"));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let res = Command::new(env!("CARGO_BIN_EXE_sparrow"))
        .args(&refs)
        .current_dir(dir.path())
        .env_remove("SPARROW_SEED")
        .output()
        .unwrap();
    assert!(res.status.success());
    let a = std::fs::read(dir.path().join("env_a/target.sprw")).unwrap();
    let b = std::fs::read(dir.path().join("env_b/target.sprw")).unwrap();
    assert_eq!(a, b, "SPARROW_SEED and --seed must agree");
}
