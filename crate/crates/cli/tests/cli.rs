use std::path::Path;
use std::process::Command;

use taskseq::corpus::{generate_corpus, save_corpus, GeneratorConfig};
use taskseq::model::TrainedModel;
use taskseq_cli::dispatch;

fn run(args: &[&str]) -> i32 {
    dispatch(std::iter::once("taskseq").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_corpus(dir: &Path) -> std::path::PathBuf {
    let corpus = generate_corpus(&GeneratorConfig {
        n_scenarios: 24,
        objects_per_environment: (15, 17),
        seed: 9,
        ..Default::default()
    })
    .unwrap();
    let path = dir.join("small.jsonl");
    save_corpus(&corpus, &path).unwrap();
    path
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["train", "--bogus"]), 2);
    assert_eq!(run(&["frobnicate"]), 2);
    assert_eq!(run(&[]), 2);
    assert_eq!(run(&["evaluate", "--corpus", "x", "--folds", "many"]), 2);
    assert_eq!(run(&["--help"]), 0);
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_taskseq");
    let status = Command::new(bin).args(["generate", "--nope"]).status().unwrap();
    assert_eq!(status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.bin");
    let out = Command::new(bin)
        .args(["rollout", "--model", p(&missing), "--corpus", p(&missing), "--scenario", "s"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: reading model"));
}

#[test]
fn generate_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let c = dir.path().join("c.jsonl");
    assert_eq!(run(&["generate", "--seed", "3", "--out", p(&a)]), 0);
    assert_eq!(run(&["generate", "--seed", "3", "--out", p(&b)]), 0);
    assert_eq!(run(&["generate", "--seed", "4", "--out", p(&c)]), 0);
    let a = std::fs::read(a).unwrap();
    assert_eq!(a, std::fs::read(b).unwrap());
    assert_ne!(a, std::fs::read(c).unwrap());
    assert_eq!(a.iter().filter(|&&x| x == b'\n').count(), 127);
}

#[test]
fn train_writes_model_and_log() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let model = dir.path().join("model.bin");
    assert_eq!(run(&["train", "--corpus", p(&corpus), "--out", p(&model), "--C", "100"]), 0);
    let m = TrainedModel::load(&model).unwrap();
    assert_eq!(m.weights.values.len(), 941);
    let log = std::fs::read_to_string(dir.path().join("model.bin.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert!(lines.len() >= 2);
    assert!(lines.last().unwrap().starts_with("converged=true"));

    assert_eq!(run(&["rollout", "--model", p(&model), "--corpus", p(&corpus), "--scenario", "s000", "--k", "3"]), 0);
    assert_eq!(run(&["rollout", "--model", p(&model), "--corpus", p(&corpus), "--scenario", "no-such"]), 1);
    assert_eq!(run(&["chain", "--model", p(&model), "--seed", "0", "--k", "3"]), 0);
    assert_eq!(run(&["feedback-eval", "--corpus", p(&corpus), "--model", p(&model), "--k", "0"]), 1);
    assert_eq!(run(&["feedback-eval", "--corpus", p(&corpus), "--model", p(&model)]), 0);
}

#[test]
fn evaluate_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let out = dir.path().join("cv.json");
    assert_eq!(run(&["evaluate", "--corpus", p(&corpus), "--folds", "3", "--C", "100", "--out", p(&out)]), 0);
    let cv: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(cv["folds"], 3);
    assert!(cv["full"]["macro_average"][0].as_f64().unwrap() > cv["chance"]["macro_average"][0].as_f64().unwrap());

    let sweep = dir.path().join("noise.json");
    let code = run(&[
        "noise-sweep", "--corpus", p(&corpus), "--folds", "3", "--C", "100", "--noise-probs", "0,0.3", "--out", p(&sweep),
    ]);
    assert_eq!(code, 0);
    let points: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&sweep).unwrap()).unwrap();
    assert_eq!(points.as_array().unwrap().len(), 2);
    assert_eq!(points[1]["per_seed"].as_array().unwrap().len(), 5);
}
