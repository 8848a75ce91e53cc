//! The `tap` command line: corpus building, training, evaluation and
//! attention analysis.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{Precision, RunConfig};
use crate::coref::{self, find_corresponded_pairs, render_attention_row, PairKind};
use crate::corpus::{self, build_corpus, corpus_stats, render_histogram, FeatureSidecar, FilterRules, SynthTask};
use crate::error::{Result, TapError};
use crate::evaluation::{align_predictions, evaluate_model, read_predictions, score, write_report_lines, Metric, MetricReport};
use crate::model::{DecodeMode, TapModel};
use crate::sample::Sample;
use crate::tensor::Scalar;
use crate::text::Vocabulary;
use crate::training::{
    build_text_vocab, prepare_answer_model, split_heldout, Checkpoint, DatasetRef, RunDir, RunManifest, Task, Trainer,
    CONFIG_FILE, MANIFEST_FILE,
};

#[derive(Debug, Parser)]
#[command(name = "tap", version, about = "Text-aware pre-training for scene-text VQA and captioning")]
pub struct Cli {
    /// Log more (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter raw OCR / detection records into a dataset and report statistics.
    BuildCorpus(BuildArgs),
    /// Write a deterministic synthetic dataset.
    SynthCorpus(SynthArgs),
    /// Pre-train with MLM, ITM and RPP.
    Pretrain(TrainArgs),
    /// Fine-tune the answer decoder on Text-VQA or Text-Caption style data.
    Finetune(FinetuneArgs),
    /// Train the answer task with pre-training losses on part of each batch.
    JointTrain(FinetuneArgs),
    /// Score a checkpoint, or a predictions file, on a dataset.
    Evaluate(EvalArgs),
    /// Coreference scores of a checkpoint's attention heads.
    AnalyzeCoref(CorefArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Vqa,
    Caption,
}

impl From<ModeArg> for DecodeMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Vqa => DecodeMode::Vqa,
            ModeArg::Caption => DecodeMode::Caption,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthTaskArg {
    Pretrain,
    Vqa,
    Caption,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Accuracy,
    Anls,
    Cider,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Accuracy => Metric::Accuracy,
            MetricArg::Anls => Metric::Anls,
            MetricArg::Cider => Metric::Cider,
        }
    }
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (TOML); omitted keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, env = "TAP_WORKERS")]
    pub workers: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long, default_value_t = false)]
    pub force: bool,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load_or_default(self.config.as_deref())?;
        if let Some(w) = self.workers {
            cfg.train.workers = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Raw records, one JSON object per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Output dataset (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    /// Filter rules (TOML); defaults to the `corpus.rules` of the config.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Binary feature sidecar referenced by `feature_ref` fields.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    /// Statistics report; defaults to `<out>.stats.json`.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Render the scene-text count histogram to this PNG.
    #[arg(long)]
    pub histogram: Option<PathBuf>,
    /// Per-record keep / discard decisions (JSON lines).
    #[arg(long)]
    pub decisions: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of samples.
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, value_enum, default_value_t = SynthTaskArg::Vqa)]
    pub task: SynthTaskArg,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset (JSON lines).
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Held-out dataset; without it `train.heldout_fraction` is split off.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    /// Output directory for config, manifest, metric log and checkpoints.
    #[arg(long, env = "TAP_RUN_DIR")]
    pub run_dir: PathBuf,
    /// Start from this checkpoint's parameters and vocabulary.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Continue the run in `--run-dir` from its last checkpoint.
    #[arg(long, default_value_t = false)]
    pub resume: bool,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `train.schedule.max_iters`.
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Vqa)]
    pub task: ModeArg,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model checkpoint; not needed with `--predictions`.
    #[arg(long, required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Vqa)]
    pub task: ModeArg,
    /// Metrics to report (repeatable); defaults to the task's metrics.
    #[arg(long, value_enum)]
    pub metric: Vec<MetricArg>,
    /// Score this predictions file (`{"sample_id", "prediction"}` lines)
    /// instead of decoding with a model.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Summary report; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-sample scores (JSON lines).
    #[arg(long)]
    pub per_sample: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct CorefArgs {
    #[arg(long, required_unless_present = "random_init")]
    pub checkpoint: Option<PathBuf>,
    /// Analyze a freshly initialized model instead of a checkpoint.
    #[arg(long, default_value_t = false, conflicts_with = "checkpoint")]
    pub random_init: bool,
    #[arg(long)]
    pub data: PathBuf,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write attention-row images of word-to-scene-text pairs here.
    #[arg(long)]
    pub dump_attention: Option<PathBuf>,
    /// Number of samples whose attention is dumped.
    #[arg(long, default_value_t = 4)]
    pub dump_limit: usize,
    /// Analyze only the first N samples (0 = all).
    #[arg(long, default_value_t = 0)]
    pub limit: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

/// Exit code of a failed command: 2 for bad input or configuration,
/// 1 for failures while running.
pub fn exit_code(e: &TapError) -> i32 {
    if e.is_input_error() {
        2
    } else {
        1
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BuildCorpus(a) => build_cmd(&a),
        Command::SynthCorpus(a) => synth_cmd(&a),
        Command::Pretrain(a) => train_cmd(&a, Task::Pretrain, None),
        Command::Finetune(a) => {
            let task = match a.task {
                ModeArg::Vqa => Task::FinetuneVqa,
                ModeArg::Caption => Task::FinetuneCaption,
            };
            train_cmd(&a.train, task, None)
        }
        Command::JointTrain(a) => train_cmd(&a.train, Task::Joint, Some(a.task.into())),
        Command::Evaluate(a) => eval_cmd(&a),
        Command::AnalyzeCoref(a) => coref_cmd(&a),
    }
}

fn check_out(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(TapError::config(
            "output",
            format!("{} exists; pass --force to overwrite", path.display()),
        ));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| TapError::io(dir, e))?;
    }
    Ok(())
}

fn write_json<S: Serialize>(path: Option<&Path>, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => fs::write(p, text + "\n").map_err(|e| TapError::io(p, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn build_cmd(a: &BuildArgs) -> Result<()> {
    let cfg = a.common.load()?;
    let mut opts = cfg.corpus.clone();
    if let Some(p) = &a.rules {
        let text = fs::read_to_string(p).map_err(|e| TapError::io(p, e))?;
        opts.rules = toml::from_str::<FilterRules>(&text).map_err(|e| TapError::config("rules", format!("{}: {e}", p.display())))?;
    }
    let input = fs::read_to_string(&a.input).map_err(|e| TapError::io(&a.input, e))?;
    let stats_path = a.stats.clone().unwrap_or_else(|| PathBuf::from(format!("{}.stats.json", a.out.display())));
    for p in [Some(&a.out), Some(&stats_path), a.histogram.as_ref(), a.decisions.as_ref()].into_iter().flatten() {
        check_out(p, a.common.force)?;
    }
    let sidecar = a.sidecar.as_deref().map(FeatureSidecar::load).transpose()?;
    let out = build_corpus(&input, &opts, sidecar.as_ref(), cfg.train.workers)?;
    corpus::write_dataset(&a.out, &out.samples)?;
    write_json(Some(&stats_path), &out.stats)?;
    if let Some(p) = &a.histogram {
        render_histogram(&out.stats.scene_text, p)?;
    }
    if let Some(p) = &a.decisions {
        let lines: String = out
            .decisions
            .iter()
            .map(|(id, d)| serde_json::json!({"image_id": id, "keep": d.keep, "reason": d.reason}).to_string() + "\n")
            .collect();
        fs::write(p, lines).map_err(|e| TapError::io(p, e))?;
    }
    log::info!("kept {} of {} records", out.stats.kept, out.stats.records);
    println!("{}", serde_json::json!({"records": out.stats.records, "kept": out.stats.kept, "malformed": out.stats.malformed}));
    Ok(())
}

fn synth_cmd(a: &SynthArgs) -> Result<()> {
    let cfg = a.common.load()?;
    check_out(&a.out, a.common.force)?;
    let task = match a.task {
        SynthTaskArg::Pretrain => SynthTask::Pretrain,
        SynthTaskArg::Vqa => SynthTask::Vqa,
        SynthTaskArg::Caption => SynthTask::Caption,
    };
    let samples = corpus::synth_corpus(a.seed, a.n, task, &cfg.synth);
    corpus::write_dataset(&a.out, &samples)?;
    let stats = corpus_stats(&samples);
    println!("{}", serde_json::json!({"samples": samples.len(), "mean_scene_text": stats.mean}));
    Ok(())
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| TapError::config(flag, "is required"))
}

fn train_cmd(a: &TrainArgs, task: Task, joint_mode: Option<DecodeMode>) -> Result<()> {
    if a.resume {
        let text = fs::read_to_string(a.run_dir.join(CONFIG_FILE)).map_err(|e| TapError::io(a.run_dir.join(CONFIG_FILE), e))?;
        let mut cfg = RunConfig::from_toml(&text)?;
        if let Some(w) = a.common.workers {
            cfg.train.workers = w;
        }
        if let Some(m) = a.max_iters {
            // Extending an interrupted run; the checkpoint keeps its hash.
            cfg.train.schedule.max_iters = m;
            cfg.validate()?;
        }
        return match cfg.precision {
            Precision::F32 => resume_typed::<f32>(a, task, cfg),
            Precision::F64 => resume_typed::<f64>(a, task, cfg),
        };
    }
    let mut cfg = a.common.load()?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = a.max_iters {
        cfg.train.schedule.max_iters = m;
    }
    if let Some(m) = joint_mode {
        cfg.train.joint_mode = m;
    }
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(a, task, cfg),
        Precision::F64 => train_typed::<f64>(a, task, cfg),
    }
}

struct Data {
    train: Vec<Sample>,
    heldout: Vec<Sample>,
    refs: Vec<DatasetRef>,
}

fn load_data(a: &TrainArgs, cfg: &RunConfig) -> Result<Data> {
    let featurizer = cfg.featurizer()?;
    let train_path = required(&a.train, "--train")?;
    let all = corpus::read_featurized(train_path, &featurizer)?;
    let mut refs = vec![DatasetRef::from_file(train_path, all.len())?];
    let (train, heldout) = match &a.heldout {
        Some(p) => {
            let h = corpus::read_featurized(p, &featurizer)?;
            refs.push(DatasetRef::from_file(p, h.len())?);
            (all, h)
        }
        None => split_heldout(&all, cfg.train.heldout_fraction, cfg.seed),
    };
    if train.is_empty() {
        return Err(TapError::Schema(format!("{}: no training samples", train_path.display())));
    }
    Ok(Data { train, heldout, refs })
}

fn train_typed<T: Scalar>(a: &TrainArgs, task: Task, mut cfg: RunConfig) -> Result<()> {
    let mut manifest_notes = Vec::new();
    let init = match &a.init {
        Some(p) => {
            let ck = Checkpoint::<T>::load(p, None)?;
            if a.common.config.is_some() && ck.model.config != cfg.model {
                return Err(TapError::config("model", "differs from the model stored in --init"));
            }
            cfg.model = ck.model.config.clone();
            cfg.validate()?;
            Some(ck.model)
        }
        None => None,
    };
    let mut rd = RunDir::create(&a.run_dir, a.common.force)?;
    let data = load_data(a, &cfg)?;
    let mut model = match init {
        Some(m) => m,
        None => TapModel::<T>::new(
            cfg.model.clone(),
            build_text_vocab(&data.train, cfg.train.vocab_min_count),
            Vocabulary::reserved_only(),
            cfg.seed,
        )?,
    };
    let mode = cfg.train.answer_mode(task);
    if let Some(mode) = mode {
        prepare_answer_model(&mut model, &data.train, mode, cfg.train.answer_min_count, cfg.seed)?;
        manifest_notes.push(format!("answer vocabulary: {} regular tokens", model.answer_vocab.regular_len()));
    }
    let hash = cfg.hash()?;
    rd.write_config(&cfg.to_toml()?)?;
    let mut manifest = RunManifest::new(cfg.seed, task, hash.clone());
    manifest.datasets = data.refs.clone();
    manifest.init_checkpoint = a.init.as_ref().map(|p| p.display().to_string());
    manifest.decoder_reinitialized = mode.is_some();
    manifest.notes = manifest_notes;
    rd.write_manifest(&manifest)?;
    let mut trainer = Trainer::new(model, task, cfg.train.clone(), cfg.seed)?;
    trainer.config_hash = hash;
    finish_run(&mut trainer, &data, &mut rd, manifest)
}

fn resume_typed<T: Scalar>(a: &TrainArgs, task: Task, cfg: RunConfig) -> Result<()> {
    let manifest: RunManifest = {
        let p = a.run_dir.join(MANIFEST_FILE);
        serde_json::from_slice(&fs::read(&p).map_err(|e| TapError::io(&p, e))?)?
    };
    if manifest.task != task {
        return Err(TapError::config("task", format!("run directory holds a {:?} run", manifest.task)));
    }
    let mut rd = RunDir::reopen(&a.run_dir)?;
    let ck = Checkpoint::<T>::load(&rd.checkpoint_path("last"), Some(&cfg.model))?;
    let data = load_data(a, &cfg)?;
    for (now, then) in data.refs.iter().zip(&manifest.datasets) {
        if now.sha256 != then.sha256 {
            return Err(TapError::config("--train", format!("{} changed since the run started", now.path)));
        }
    }
    let mut trainer = Trainer::resume(ck, task, cfg.train.clone())?;
    log::info!("resuming at iteration {}", trainer.iteration);
    finish_run(&mut trainer, &data, &mut rd, manifest)
}

fn finish_run<T: Scalar>(trainer: &mut Trainer<T>, data: &Data, rd: &mut RunDir, mut manifest: RunManifest) -> Result<()> {
    let summary = trainer.run(&data.train, &data.heldout, Some(rd))?;
    manifest.iterations = trainer.iteration;
    manifest.best_iteration = trainer.best().map(|b| b.1);
    manifest.best_score = trainer.best().map(|b| b.0);
    rd.write_manifest(&manifest)?;
    println!(
        "{}",
        serde_json::json!({
            "run_dir": rd.root().display().to_string(),
            "iterations": trainer.iteration,
            "steps": summary.trace.len(),
            "best_iteration": manifest.best_iteration,
            "best_score": manifest.best_score,
        })
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    task: DecodeMode,
    samples: usize,
    metrics: BTreeMap<String, f64>,
    reports: Vec<MetricSummary>,
}

#[derive(Serialize)]
struct MetricSummary {
    metric: Metric,
    aggregate: f64,
    params: serde_json::Value,
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let cfg = a.common.load()?;
    let mode: DecodeMode = a.task.into();
    let metrics: Vec<Metric> = if a.metric.is_empty() {
        Metric::for_mode(mode)
    } else {
        a.metric.iter().map(|&m| m.into()).collect()
    };
    if let Some(m) = metrics.iter().find(|m| m.mode() != mode) {
        return Err(TapError::config("--metric", format!("{m:?} does not apply to the {mode:?} task")));
    }
    for p in [a.out.as_ref(), a.per_sample.as_ref()].into_iter().flatten() {
        check_out(p, a.common.force)?;
    }
    let reports = match &a.predictions {
        Some(p) => {
            let samples = corpus::read_dataset(&a.data)?;
            let preds = align_predictions(&samples, &read_predictions(p)?)?;
            score(&samples, &preds, &metrics, &cfg.eval)?
        }
        None => {
            let ck = required(&a.checkpoint, "--checkpoint")?;
            match cfg.precision {
                Precision::F32 => eval_model::<f32>(ck, &a.data, mode, &metrics, cfg)?,
                Precision::F64 => eval_model::<f64>(ck, &a.data, mode, &metrics, cfg)?,
            }
        }
    };
    if let Some(p) = &a.per_sample {
        write_report_lines(p, &reports)?;
    }
    let summary = EvalSummary {
        task: mode,
        samples: reports.first().map_or(0, |r| r.per_sample.len()),
        metrics: reports
            .iter()
            .map(|r| (serde_json::to_value(r.metric).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(), r.aggregate))
            .collect(),
        reports: reports
            .iter()
            .map(|r| MetricSummary {
                metric: r.metric,
                aggregate: r.aggregate,
                params: r.params.clone(),
            })
            .collect(),
    };
    write_json(a.out.as_deref(), &summary)
}

fn eval_model<T: Scalar>(ck: &Path, data: &Path, mode: DecodeMode, metrics: &[Metric], mut cfg: RunConfig) -> Result<Vec<MetricReport>> {
    let model = Checkpoint::<T>::load(ck, None)?.model;
    cfg.model = model.config.clone();
    let samples = corpus::read_featurized(data, &cfg.featurizer()?)?;
    crate::training::check_dataset(&model, &samples)?;
    evaluate_model(&model, &samples, mode, metrics, &cfg.eval, cfg.train.workers)
}

fn coref_cmd(a: &CorefArgs) -> Result<()> {
    let mut cfg = a.common.load()?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    for p in [a.out.as_ref()].into_iter().flatten() {
        check_out(p, a.common.force)?;
    }
    if let Some(d) = &a.dump_attention {
        if d.exists() && fs::read_dir(d).map_err(|e| TapError::io(d, e))?.next().is_some() && !a.common.force {
            return Err(TapError::config("--dump-attention", format!("{} is not empty; pass --force", d.display())));
        }
        fs::create_dir_all(d).map_err(|e| TapError::io(d, e))?;
    }
    match cfg.precision {
        Precision::F32 => coref_typed::<f32>(a, cfg),
        Precision::F64 => coref_typed::<f64>(a, cfg),
    }
}

fn coref_typed<T: Scalar>(a: &CorefArgs, mut cfg: RunConfig) -> Result<()> {
    let ck = a.checkpoint.as_deref().map(|p| Checkpoint::<T>::load(p, None)).transpose()?;
    if let Some(ck) = &ck {
        cfg.model = ck.model.config.clone();
    }
    let mut samples = corpus::read_featurized(&a.data, &cfg.featurizer()?)?;
    if a.limit > 0 {
        samples.truncate(a.limit);
    }
    let model = match ck {
        Some(ck) => ck.model,
        None => TapModel::<T>::new(
            cfg.model.clone(),
            build_text_vocab(&samples, cfg.train.vocab_min_count),
            Vocabulary::reserved_only(),
            cfg.seed,
        )?,
    };
    crate::training::check_dataset(&model, &samples)?;
    let report = coref::analyze(&model, &samples, cfg.train.workers)?;
    if let Some(dir) = &a.dump_attention {
        for (i, s) in samples.iter().take(a.dump_limit).enumerate() {
            let maps = coref::sample_attention(&model, s)?;
            let mut sources: Vec<usize> = find_corresponded_pairs(s)
                .into_iter()
                .filter(|p| p.kind == PairKind::WordToOcr)
                .map(|p| p.source)
                .collect();
            sources.dedup();
            for src in sources {
                let word = s.text.token(src).unwrap_or("");
                let safe: String = word.chars().filter(|c| c.is_ascii_alphanumeric()).collect();
                render_attention_row(&maps, src, &dir.join(format!("{i:04}_{src:03}_{safe}.png")))?;
            }
        }
    }
    write_json(a.out.as_deref(), &report)
}
