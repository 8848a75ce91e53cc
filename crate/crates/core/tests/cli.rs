use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
seed = 3
precision = "f64"

[model]
hidden = 16
heads = 2
intermediate = 24
visual_dim = 8

[train.schedule]
batch_size = 4
max_iters = 8
warmup_iters = 2
decay_steps = []

[train]
eval_limit = 8

[synth]
visual_dim = 8

[corpus]
visual_dim = 8
"#;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn tap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tap"))
        .args(args)
        .env_remove("TAP_RUN_DIR")
        .env_remove("TAP_WORKERS")
        .output()
        .expect("spawn tap")
}

fn ok(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap_or(Value::Null)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn synth(&self, name: &str, task: &str, n: usize, seed: u64) -> PathBuf {
        let out = self.p(name);
        ok(&tap(&[
            "synth-corpus", "--config", s(&self.p("tiny.toml")), "--task", task, "--n", &n.to_string(),
            "--seed", &seed.to_string(), "--out", s(&out),
        ]));
        out
    }
}

#[test]
fn build_corpus_filters_the_fixture() {
    let env = Env::new();
    let out = env.p("corpus/data.jsonl");
    let hist = env.p("corpus/hist.png");
    let input = fixture("filter_records.jsonl");
    let summary = ok(&tap(&["build-corpus", "--input", s(&input), "--out", s(&out), "--histogram", s(&hist)]));
    assert_eq!(summary["kept"], 4);
    let stats: Value = serde_json::from_str(&fs::read_to_string(env.p("corpus/data.jsonl.stats.json")).unwrap()).unwrap();
    assert_eq!(stats["kept"], 4);
    assert_eq!(stats["reasons"]["no_text"], 3);
    assert_eq!(stats["reasons"]["watermark_only"], 2);
    assert_eq!(stats["reasons"]["tiny_only"], 1);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 4);
    assert!(hist.exists());

    let again = tap(&["build-corpus", "--input", s(&input), "--out", s(&out)]);
    assert_eq!(again.status.code(), Some(2), "existing output needs --force");
    ok(&tap(&["build-corpus", "--input", s(&input), "--out", s(&out), "--force"]));
}

#[test]
fn missing_input_exits_with_input_error() {
    let env = Env::new();
    let out = tap(&["build-corpus", "--input", s(&env.p("nope.jsonl")), "--out", s(&env.p("o.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.jsonl"));
}

#[test]
fn schema_failure_exits_with_input_error() {
    let env = Env::new();
    let bad = env.p("bad.jsonl");
    fs::write(&bad, "{\"image_id\": \"a\"}\nnot json\n").unwrap();
    let out = tap(&["build-corpus", "--input", s(&bad), "--out", s(&env.p("o.jsonl"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn unknown_config_key_exits_with_input_error() {
    let env = Env::new();
    fs::write(env.p("bad.toml"), "[model]\nhiden = 3\n").unwrap();
    let out = tap(&["synth-corpus", "--config", s(&env.p("bad.toml")), "--out", s(&env.p("x.jsonl"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("hiden"));
}

#[test]
fn synth_corpus_is_deterministic() {
    let env = Env::new();
    let a = env.synth("a.jsonl", "vqa", 20, 5);
    let b = env.synth("b.jsonl", "vqa", 20, 5);
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn help_shows_defaults() {
    let out = tap(&["pretrain", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("--max-iters") && text.contains("[env: TAP_RUN_DIR"), "{text}");
    let out = tap(&["analyze-coref", "--help"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("[default: 4]"));
}

fn step_lines(run: &Path) -> Vec<Value> {
    fs::read_to_string(run.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|v| v["kind"] == "step")
        .collect()
}

#[test]
fn pretrain_finetune_evaluate_and_analyze() {
    let env = Env::new();
    let cfg = env.p("tiny.toml");
    let pre = env.synth("pre.jsonl", "pretrain", 24, 1);
    let vqa = env.synth("vqa.jsonl", "vqa", 24, 2);

    let run = env.p("runs/pre");
    let summary = ok(&tap(&["pretrain", "--config", s(&cfg), "--train", s(&pre), "--run-dir", s(&run)]));
    assert_eq!(summary["iterations"], 8);
    for f in ["config.toml", "manifest.json", "metrics.jsonl", "checkpoints/best.ckpt", "checkpoints/last.ckpt"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let manifest: Value = serde_json::from_str(&fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["iterations"], 8);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(step_lines(&run).len(), 8);
    let rerun = tap(&["pretrain", "--config", s(&cfg), "--train", s(&pre), "--run-dir", s(&run)]);
    assert_eq!(rerun.status.code(), Some(2), "run dir is not overwritten without --force");

    let ft = env.p("runs/ft");
    let best = run.join("checkpoints/best.ckpt");
    ok(&tap(&["finetune", "--train", s(&vqa), "--run-dir", s(&ft), "--init", s(&best), "--max-iters", "4", "--config", s(&cfg)]));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(ft.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["decoder_reinitialized"], true);
    assert_eq!(manifest["task"], "finetune_vqa");

    let report = env.p("eval.json");
    ok(&tap(&[
        "evaluate", "--config", s(&cfg), "--checkpoint", s(&ft.join("checkpoints/last.ckpt")), "--data", s(&vqa),
        "--out", s(&report), "--per-sample", s(&env.p("per.jsonl")),
    ]));
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["metrics"]["accuracy"].is_number() && r["metrics"]["anls"].is_number());
    assert_eq!(fs::read_to_string(env.p("per.jsonl")).unwrap().lines().count(), 48);

    let dump = env.p("attn");
    let coref = ok(&tap(&[
        "analyze-coref", "--config", s(&cfg), "--checkpoint", s(&best), "--data", s(&vqa), "--dump-attention", s(&dump),
        "--dump-limit", "2",
    ]));
    assert!(coref["kinds"]["word->ocr"]["pairs"].as_u64().unwrap() > 0);
    assert!(coref["kinds"]["word->ocr"]["score"].is_number());
    let pngs = fs::read_dir(&dump).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert!(pngs > 0);

    let random = ok(&tap(&["analyze-coref", "--config", s(&cfg), "--random-init", "--data", s(&vqa)]));
    assert!(random["kinds"]["word->ocr"]["score"].is_number());
}

#[test]
fn resume_continues_the_same_trace() {
    let env = Env::new();
    let cfg = env.p("tiny.toml");
    let pre = env.synth("pre.jsonl", "pretrain", 16, 4);
    let full = env.p("full");
    ok(&tap(&["pretrain", "--config", s(&cfg), "--train", s(&pre), "--run-dir", s(&full)]));
    let part = env.p("part");
    ok(&tap(&["pretrain", "--config", s(&cfg), "--train", s(&pre), "--run-dir", s(&part), "--max-iters", "4"]));
    ok(&tap(&["pretrain", "--train", s(&pre), "--run-dir", s(&part), "--resume", "--max-iters", "8"]));
    assert_eq!(step_lines(&full), step_lines(&part));
}

#[test]
fn env_overrides_run_dir_and_workers() {
    let env = Env::new();
    let pre = env.synth("pre.jsonl", "pretrain", 12, 4);
    let run = env.p("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_tap"))
        .args(["pretrain", "--config", s(&env.p("tiny.toml")), "--train", s(&pre), "--max-iters", "3"])
        .env("TAP_RUN_DIR", &run)
        .env("TAP_WORKERS", "2")
        .output()
        .unwrap();
    ok(&out);
    assert!(run.join("checkpoints/last.ckpt").exists());
}

#[test]
fn evaluate_scores_an_oracle_predictions_file() {
    let env = Env::new();
    let data = env.synth("vqa.jsonl", "vqa", 3, 9);
    let samples: Vec<Value> = fs::read_to_string(&data).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let preds: String = samples
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let p = if i == 2 { "zzz".to_string() } else { v["answers"][0].as_str().unwrap().to_uppercase() };
            serde_json::json!({"sample_id": v["image_id"], "prediction": p}).to_string() + "\n"
        })
        .collect();
    fs::write(env.p("preds.jsonl"), preds).unwrap();
    let r = ok(&tap(&["evaluate", "--data", s(&data), "--predictions", s(&env.p("preds.jsonl"))]));
    assert!((r["metrics"]["accuracy"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert!((r["metrics"]["anls"].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-12);
    let bad = tap(&["evaluate", "--data", s(&data), "--predictions", s(&env.p("preds.jsonl")), "--metric", "cider"]);
    assert_eq!(bad.status.code(), Some(2));
}
