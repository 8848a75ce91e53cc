//! Optimization loops: pre-training, fine-tuning and joint training.

pub mod checkpoint;
mod optim;
mod rundir;
mod schedule;

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, TrainerState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{Adam, AdamConfig};
pub use rundir::{DatasetRef, RunDir, RunManifest, CHECKPOINT_DIR, CONFIG_FILE, MANIFEST_FILE, METRICS_FILE};
pub use schedule::Schedule;

use crate::error::{Result, TapError};
use crate::evaluation::{evaluate_model, EvalConfig, Metric};
use crate::model::{answer_targets, majority_answer, AnswerTargets, DecodeMode, DecodeToken, ModelConfig, TapModel};
use crate::rng::{derive_rng, RngState};
use crate::sample::{build_pretrain_instance, InstanceRng, PretrainInstance, PretrainTasks, Sample};
use crate::tensor::{Gradients, ParamStore, Scalar};
use crate::text::{ocr_token, tokenize, Vocabulary};
use crate::work::par_map;

const BATCH_KEY: u64 = 0xba7c;
const INSTANCE_KEY: u64 = 0x1a57;
const DROPOUT_KEY: u64 = 0xd209;
const JOINT_KEY: u64 = 0x7017;
const EVAL_KEY: u64 = 0xe7a1;
const SPLIT_KEY: u64 = 0x5917;
const DECODER_KEY: u64 = 0xdec0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Pretrain,
    FinetuneVqa,
    FinetuneCaption,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub mlm: f64,
    pub itm: f64,
    pub rpp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mlm: 1.0,
            itm: 1.0,
            rpp: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub adam: AdamConfig,
    /// Maximum global gradient L2 norm.
    pub clip_norm: f64,
    pub weights: LossWeights,
    pub tasks: PretrainTasks,
    /// Share of each joint-training batch that gets pre-training losses.
    pub joint_fraction: f64,
    /// Answer task of joint training.
    pub joint_mode: DecodeMode,
    pub heldout_fraction: f64,
    /// Evaluation interval in iterations; 0 means once per epoch.
    pub eval_every: usize,
    /// Evaluate on at most this many held-out samples (0 = all).
    pub eval_limit: usize,
    /// Interval of `last` checkpoints; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub workers: usize,
    pub vocab_min_count: usize,
    pub answer_min_count: usize,
    pub anls_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::desk(),
            adam: AdamConfig::default(),
            clip_norm: 0.25,
            weights: LossWeights::default(),
            tasks: PretrainTasks::default(),
            joint_fraction: 0.5,
            joint_mode: DecodeMode::Vqa,
            heldout_fraction: 0.1,
            eval_every: 0,
            eval_limit: 0,
            checkpoint_every: 0,
            workers: 1,
            vocab_min_count: 1,
            answer_min_count: 1,
            anls_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        self.schedule.validate()?;
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(TapError::config(format!("train.{name}"), format!("{v} is not a probability")))
            }
        };
        prob("joint_fraction", self.joint_fraction)?;
        prob("tasks.itm_prob", self.tasks.itm_prob)?;
        prob("tasks.mask.prob", self.tasks.mask.prob)?;
        prob("tasks.mask.replace_mask", self.tasks.mask.replace_mask)?;
        prob("tasks.mask.replace_random", self.tasks.mask.replace_random)?;
        prob(
            "tasks.mask.replace_random",
            self.tasks.mask.replace_mask + self.tasks.mask.replace_random,
        )?;
        if !(0.0..1.0).contains(&self.heldout_fraction) {
            return Err(TapError::config("train.heldout_fraction", "must lie in [0, 1)"));
        }
        if !(self.clip_norm.is_finite() && self.clip_norm > 0.0) {
            return Err(TapError::config("train.clip_norm", "must be positive"));
        }
        for (name, w) in [("mlm", self.weights.mlm), ("itm", self.weights.itm), ("rpp", self.weights.rpp)] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(TapError::config(format!("train.weights.{name}"), "must be finite and non-negative"));
            }
        }
        if self.workers == 0 {
            return Err(TapError::config("train.workers", "need at least one worker"));
        }
        if !(self.anls_threshold > 0.0 && self.anls_threshold < 1.0) {
            return Err(TapError::config("train.anls_threshold", "must lie in (0, 1)"));
        }
        if self.tasks.rpp_mode != model.rpp_mode {
            return Err(TapError::config(
                "train.tasks.rpp_mode",
                format!("{:?} differs from model.rpp_mode {:?}", self.tasks.rpp_mode, model.rpp_mode),
            ));
        }
        Ok(())
    }

    pub fn answer_mode(&self, task: Task) -> Option<DecodeMode> {
        match task {
            Task::Pretrain => None,
            Task::FinetuneVqa => Some(DecodeMode::Vqa),
            Task::FinetuneCaption => Some(DecodeMode::Caption),
            Task::Joint => Some(self.joint_mode),
        }
    }
}

/// Mean loss and top-1 accuracy of one task over a batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskStat {
    pub loss: f64,
    pub accuracy: f64,
    /// MLM positions, ITM / RPP instances or answer sequences.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: usize,
    pub lr: f64,
    /// The optimized objective.
    pub loss: f64,
    pub mlm: Option<TaskStat>,
    pub itm: Option<TaskStat>,
    pub rpp: Option<TaskStat>,
    /// Teacher-forced decoding; accuracy is per decoding step.
    pub answer: Option<TaskStat>,
    pub grad_norm: f64,
    pub clipped_norm: f64,
    pub pretrain_items: usize,
    pub answer_items: usize,
}

impl StepReport {
    pub fn task_losses(&self) -> BTreeMap<&'static str, f64> {
        [("mlm", self.mlm), ("itm", self.itm), ("rpp", self.rpp), ("answer", self.answer)]
            .into_iter()
            .filter_map(|(k, s)| s.map(|s| (k, s.loss)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: usize,
    pub metrics: BTreeMap<String, f64>,
    /// Model-selection score: the mean pre-training task accuracy, or the
    /// first task metric when an answer task is trained.
    pub score: f64,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogRecord<'a> {
    Step(&'a StepReport),
    Eval(&'a EvalRecord),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub trace: Vec<StepReport>,
    pub evals: Vec<EvalRecord>,
    pub best_iteration: Option<usize>,
    pub best_score: Option<f64>,
}

/// Loss sum, normalizer count and accuracy hits/trials of one task.
#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    loss: f64,
    items: usize,
    hits: usize,
    trials: usize,
}

impl Tally {
    fn add(&mut self, o: &Tally) {
        self.loss += o.loss;
        self.items += o.items;
        self.hits += o.hits;
        self.trials += o.trials;
    }

    fn stat(&self) -> Option<TaskStat> {
        (self.items > 0).then(|| TaskStat {
            loss: self.loss / self.items as f64,
            accuracy: if self.trials == 0 {
                0.0
            } else {
                self.hits as f64 / self.trials as f64
            },
            count: self.items,
        })
    }
}

const MLM: usize = 0;
const ITM: usize = 1;
const RPP: usize = 2;
const ANSWER: usize = 3;

enum Item<T> {
    Pretrain(PretrainInstance),
    Answer { sample: Sample, targets: AnswerTargets<T> },
}

struct ItemOut<T> {
    grads: Option<Gradients<T>>,
    tally: [Tally; 4],
    objective: f64,
}

/// Decoder inputs and targets for one answer-task sample. Caption samples
/// have `w^q` blanked.
pub fn answer_item<T: Scalar>(
    sample: &Sample,
    mode: DecodeMode,
    answer_vocab: &Vocabulary,
    max_steps: usize,
) -> Result<(Sample, AnswerTargets<T>)> {
    let mut s = sample.clone();
    let answer = match mode {
        DecodeMode::Vqa => s.answers.as_deref().and_then(majority_answer).map(str::to_string),
        DecodeMode::Caption => s
            .caption
            .clone()
            .or_else(|| s.answers.as_ref().and_then(|a| a.first().cloned())),
    }
    .ok_or_else(|| TapError::Schema(format!("sample {} has no ground truth for {mode:?}", s.image_id)))?;
    if mode == DecodeMode::Caption {
        s.question.clear();
        s.text.question.clear();
    }
    let words: Vec<String> = s.ocr.iter().map(|r| r.word.clone()).collect();
    let targets = answer_targets(&answer, answer_vocab, &words, max_steps);
    Ok((s, targets))
}

/// Per-slot coin flips deciding which joint-training items get the
/// pre-training losses (true) or the answer loss (false).
pub fn joint_split(seed: u64, iteration: usize, batch: usize, fraction: f64) -> Vec<bool> {
    (0..batch)
        .map(|slot| derive_rng(seed, &[JOINT_KEY, iteration as u64, slot as u64]).random_bool(fraction))
        .collect()
}

/// Text vocabulary over all extended-text tokens of `samples`.
pub fn build_text_vocab(samples: &[Sample], min_count: usize) -> Vocabulary {
    Vocabulary::build(samples.iter().flat_map(|s| s.text.iter().map(|(t, _)| t.to_string())), min_count)
}

/// Fixed answer vocabulary: answer (or caption) tokens that the sample's
/// own OCR tokens cannot supply. Copyable words stay with the pointer.
pub fn build_answer_vocab(samples: &[Sample], mode: DecodeMode, min_count: usize) -> Vocabulary {
    let mut tokens = Vec::new();
    for s in samples {
        let ocr: Vec<String> = s.ocr.iter().map(|r| ocr_token(&r.word)).collect();
        let texts: Vec<&String> = match mode {
            DecodeMode::Vqa => s.answers.iter().flatten().collect(),
            DecodeMode::Caption => s.caption.iter().chain(s.answers.iter().flatten()).collect(),
        };
        for t in texts.into_iter().flat_map(|t| tokenize(t)) {
            if !ocr.contains(&t) {
                tokens.push(t);
            }
        }
    }
    Vocabulary::build(tokens, min_count)
}

/// Deterministic split into (train, held-out); both keep input order.
/// A non-zero fraction holds out at least one sample when two exist.
pub fn split_heldout(samples: &[Sample], fraction: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let n = samples.len();
    let mut k = (n as f64 * fraction).round() as usize;
    if fraction > 0.0 && n >= 2 {
        k = k.clamp(1, n - 1);
    }
    let mut rng = derive_rng(seed, &[SPLIT_KEY]);
    let mut held = vec![false; n];
    for i in sample_indices(&mut rng, n, k.min(n)) {
        held[i] = true;
    }
    let (mut train, mut heldout) = (Vec::new(), Vec::new());
    for (s, h) in samples.iter().zip(held) {
        if h {
            heldout.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    (train, heldout)
}

/// Checks every sample against the model's caps and feature widths.
pub fn check_dataset<T: Scalar>(model: &TapModel<T>, samples: &[Sample]) -> Result<()> {
    for s in samples {
        s.validate(&model.config.caps, model.config.visual_dim)?;
        if !s.is_featurized() {
            return Err(TapError::Schema(format!(
                "sample {}: OCR word features missing (featurize the dataset first)",
                s.image_id
            )));
        }
    }
    Ok(())
}

/// Gives the model a fresh decoder over an answer vocabulary built from
/// `train`; every other parameter is kept.
pub fn prepare_answer_model<T: Scalar>(
    model: &mut TapModel<T>,
    train: &[Sample],
    mode: DecodeMode,
    min_count: usize,
    seed: u64,
) -> Result<()> {
    let vocab = build_answer_vocab(train, mode, min_count);
    model.reset_decoder(vocab, derive_rng(seed, &[DECODER_KEY]).random())
}

pub struct Trainer<T: Scalar> {
    pub model: TapModel<T>,
    pub optimizer: Adam<T>,
    pub config: TrainConfig,
    pub task: Task,
    pub seed: u64,
    pub iteration: usize,
    /// Hash of the run configuration, stamped into checkpoints.
    pub config_hash: String,
    rng: ChaCha8Rng,
    best: Option<(f64, usize)>,
    best_params: Option<ParamStore<T>>,
}

impl<T: Scalar> Trainer<T> {
    /// Starts from `model` with fresh optimizer state. For answer tasks the
    /// model must already carry its answer vocabulary and decoder (see
    /// [`prepare_answer_model`]).
    pub fn new(model: TapModel<T>, task: Task, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate(&model.config)?;
        Ok(Self {
            optimizer: Adam::new(config.adam, &model.params),
            rng: derive_rng(seed, &[BATCH_KEY]),
            model,
            config,
            task,
            seed,
            iteration: 0,
            config_hash: String::new(),
            best: None,
            best_params: None,
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: Checkpoint<T>, task: Task, config: TrainConfig) -> Result<Self> {
        let state = ck
            .trainer
            .ok_or_else(|| TapError::Checkpoint("checkpoint carries no trainer state".into()))?;
        let mut t = Self::new(ck.model, task, config, state.seed)?;
        if let Some(o) = ck.optimizer {
            t.optimizer = o;
        }
        t.iteration = state.iteration;
        t.rng = state.rng.restore();
        t.best = state.best_score.zip(state.best_iteration);
        t.config_hash = ck.config_hash;
        Ok(t)
    }

    pub fn answer_mode(&self) -> Option<DecodeMode> {
        self.config.answer_mode(self.task)
    }

    pub fn best(&self) -> Option<(f64, usize)> {
        self.best
    }

    fn trainer_state(&self) -> TrainerState {
        TrainerState {
            seed: self.seed,
            iteration: self.iteration,
            rng: RngState::capture(&self.rng),
            best_score: self.best.map(|b| b.0),
            best_iteration: self.best.map(|b| b.1),
        }
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::json!({ "task": self.task })
    }

    /// Current parameters, optimizer moments and trainer position.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            model: self.model.clone(),
            optimizer: Some(self.optimizer.clone()),
            trainer: Some(self.trainer_state()),
            config_hash: self.config_hash.clone(),
            meta: self.meta(),
        }
    }

    /// The model with the best evaluation score so far (the current one if
    /// nothing was evaluated).
    pub fn best_model(&self) -> TapModel<T> {
        let mut m = self.model.clone();
        if let Some(p) = &self.best_params {
            m.params = p.clone();
        }
        m
    }

    pub fn best_checkpoint(&self) -> Checkpoint<T> {
        let mut ck = Checkpoint::from_model(self.best_model());
        ck.config_hash = self.config_hash.clone();
        ck.meta = self.meta();
        ck.meta["best_iteration"] = serde_json::json!(self.best.map(|b| b.1));
        ck
    }

    fn build_items(&self, data: &[Sample], indices: &[usize], iteration: usize) -> Result<Vec<Item<T>>> {
        let mode = self.answer_mode();
        let pretrain_slots: Vec<bool> = match self.task {
            Task::Pretrain => vec![true; indices.len()],
            Task::FinetuneVqa | Task::FinetuneCaption => vec![false; indices.len()],
            Task::Joint => joint_split(self.seed, iteration, indices.len(), self.config.joint_fraction),
        };
        indices
            .iter()
            .zip(pretrain_slots)
            .enumerate()
            .map(|(slot, (&idx, pre))| {
                let s = &data[idx];
                if pre {
                    let mut r = InstanceRng::new(self.seed, &[INSTANCE_KEY, iteration as u64, slot as u64]);
                    build_pretrain_instance(s, data, &self.model.vocab, &mut r, &self.config.tasks).map(Item::Pretrain)
                } else {
                    let mode = mode.expect("answer items only in answer tasks");
                    let steps = self.model.config.max_decode_steps(mode);
                    answer_item(s, mode, &self.model.answer_vocab, steps)
                        .map(|(sample, targets)| Item::Answer { sample, targets })
                }
            })
            .collect()
    }

    fn run_item(&self, item: &Item<T>, iteration: usize, slot: usize, norms: &[f64; 4], grads: bool) -> Result<ItemOut<T>> {
        let model = &self.model;
        let mut g = model.graph();
        let mut drop = (model.config.dropout > 0.0 && grads)
            .then(|| derive_rng(self.seed, &[DROPOUT_KEY, iteration as u64, slot as u64]));
        let mut tally = [Tally::default(); 4];
        let mut terms = Vec::new();
        match item {
            Item::Pretrain(inst) => {
                let fwd = model.forward(&mut g, &inst.sample, &[DecodeToken::Begin], drop.as_mut())?;
                let out = model.pretrain_outputs(&mut g, &fwd, inst, self.config.tasks.itm);
                let w = &self.config.weights;
                for (k, (term, weight)) in out.terms().into_iter().zip([w.mlm, w.itm, w.rpp]).enumerate() {
                    if let Some(loss) = term.loss {
                        tally[k] = Tally {
                            loss: g.value(loss).data[0].to_f64().unwrap_or(f64::NAN),
                            items: term.count,
                            hits: term.correct,
                            trials: term.count,
                        };
                        terms.push((loss, T::from_f64_lossy(weight / norms[k])));
                    }
                }
            }
            Item::Answer { sample, targets } => {
                let fwd = model.forward(&mut g, sample, &targets.inputs, drop.as_mut())?;
                let (loss, hits) = model.decode_loss_and_hits(&mut g, &fwd, targets);
                tally[ANSWER] = Tally {
                    loss: g.value(loss).data[0].to_f64().unwrap_or(f64::NAN),
                    items: 1,
                    hits,
                    trials: targets.targets.rows,
                };
                terms.push((loss, T::from_f64_lossy(1.0 / norms[ANSWER])));
            }
        }
        if terms.is_empty() {
            return Ok(ItemOut {
                grads: grads.then(|| Gradients::zeros_like(&model.params)),
                tally,
                objective: 0.0,
            });
        }
        let objective = g.weighted_sum(&terms);
        let value = g.value(objective).data[0].to_f64().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(TapError::NumericDivergence {
                layer: model.config.text_layers() + model.config.mm_layers(),
            });
        }
        let grads = grads.then(|| {
            let mut gr = Gradients::zeros_like(&model.params);
            g.backward(objective, &mut gr);
            gr
        });
        Ok(ItemOut {
            grads,
            tally,
            objective: value,
        })
    }

    /// Forward (and optionally backward) over one batch. Gradients are
    /// summed in batch order, so the result is independent of `workers`.
    fn run_batch(&self, data: &[Sample], indices: &[usize], iteration: usize, grads: bool) -> Result<(Option<Gradients<T>>, StepReport)> {
        let items = self.build_items(data, indices, iteration)?;
        let mut norms = [0.0; 4];
        for it in &items {
            match it {
                Item::Pretrain(inst) => {
                    norms[MLM] += inst.mask_positions.len() as f64;
                    norms[ITM] += f64::from(u8::from(self.config.tasks.itm));
                    norms[RPP] += f64::from(u8::from(inst.rpp.is_some()));
                }
                Item::Answer { .. } => norms[ANSWER] += 1.0,
            }
        }
        let mut total = grads.then(|| Gradients::zeros_like(&self.model.params));
        let mut tally = [Tally::default(); 4];
        let mut objective = 0.0;
        let wave = self.config.workers.max(1);
        let slots: Vec<usize> = (0..items.len()).collect();
        for chunk in slots.chunks(wave) {
            let outs = par_map(chunk, wave, |_, &slot| self.run_item(&items[slot], iteration, slot, &norms, grads));
            for out in outs {
                let out = out?;
                if let (Some(t), Some(g)) = (total.as_mut(), out.grads.as_ref()) {
                    t.grads.iter_mut().zip(&g.grads).for_each(|(a, b)| a.add_assign(b));
                }
                for (a, b) in tally.iter_mut().zip(&out.tally) {
                    a.add(b);
                }
                objective += out.objective;
            }
        }
        let report = StepReport {
            iteration,
            lr: self.config.schedule.lr_at(iteration),
            loss: objective,
            mlm: tally[MLM].stat(),
            itm: tally[ITM].stat(),
            rpp: tally[RPP].stat(),
            answer: tally[ANSWER].stat(),
            grad_norm: 0.0,
            clipped_norm: 0.0,
            pretrain_items: items.iter().filter(|i| matches!(i, Item::Pretrain(_))).count(),
            answer_items: norms[ANSWER] as usize,
        };
        Ok((total, report))
    }

    /// Losses on a fixed batch without touching any state. `key` selects
    /// the masking / pollution draws.
    pub fn probe(&self, data: &[Sample], indices: &[usize], key: usize) -> Result<StepReport> {
        Ok(self.run_batch(data, indices, key, false)?.1)
    }

    /// One optimizer step on a batch drawn uniformly (with replacement)
    /// from `data`. On error nothing is modified.
    pub fn step(&mut self, data: &[Sample]) -> Result<StepReport> {
        if data.is_empty() {
            return Err(TapError::config("dataset", "no training samples"));
        }
        let mut rng = self.rng.clone();
        let indices: Vec<usize> = (0..self.config.schedule.batch_size)
            .map(|_| rng.random_range(0..data.len()))
            .collect();
        let (grads, mut report) = self.run_batch(data, &indices, self.iteration, true)?;
        let mut grads = grads.expect("gradients requested");
        if !grads.all_finite() {
            return Err(TapError::NumericDivergence {
                layer: self.model.config.text_layers() + self.model.config.mm_layers(),
            });
        }
        let pre = grads.clip_global_norm(T::from_f64_lossy(self.config.clip_norm));
        report.grad_norm = pre.to_f64().unwrap_or(f64::NAN);
        report.clipped_norm = grads.global_norm().to_f64().unwrap_or(f64::NAN);
        self.optimizer.update(&mut self.model.params, &grads, report.lr);
        self.rng = rng;
        self.iteration += 1;
        Ok(report)
    }

    /// Held-out evaluation: pre-training task accuracies (with fixed
    /// per-sample draws) or the answer-task metrics.
    pub fn evaluate(&self, heldout: &[Sample], pool: &[Sample]) -> Result<EvalRecord> {
        let limit = if self.config.eval_limit == 0 {
            heldout.len()
        } else {
            self.config.eval_limit.min(heldout.len())
        };
        let heldout = &heldout[..limit];
        let mut metrics = BTreeMap::new();
        let score = match self.answer_mode() {
            None => {
                let scores = pretrain_accuracy(&self.model, heldout, pool, &self.config.tasks, self.seed, self.config.workers)?;
                for (k, v) in [("mlm_accuracy", scores.mlm), ("itm_accuracy", scores.itm), ("rpp_accuracy", scores.rpp)] {
                    if let Some(v) = v {
                        metrics.insert(k.to_string(), v);
                    }
                }
                scores.combined
            }
            Some(mode) => {
                let cfg = EvalConfig {
                    anls_threshold: self.config.anls_threshold,
                };
                let reports = evaluate_model(&self.model, heldout, mode, &Metric::for_mode(mode), &cfg, self.config.workers)?;
                for r in &reports {
                    metrics.insert(serde_json::to_value(r.metric)?.as_str().unwrap_or("metric").to_string(), r.aggregate);
                }
                reports.first().map_or(0.0, |r| r.aggregate)
            }
        };
        Ok(EvalRecord {
            iteration: self.iteration,
            metrics,
            score,
        })
    }

    /// Trains until `schedule.max_iters`, evaluating on `heldout` and
    /// keeping the best-scoring parameters. With a run directory, steps and
    /// evaluations go to the metric log and `best` / `last` checkpoints are
    /// written; on divergence the last good state is saved as `last_good`.
    pub fn run(&mut self, train: &[Sample], heldout: &[Sample], mut dir: Option<&mut RunDir>) -> Result<RunSummary> {
        check_dataset(&self.model, train)?;
        check_dataset(&self.model, heldout)?;
        let max = self.config.schedule.max_iters;
        let epoch = train.len().div_ceil(self.config.schedule.batch_size).max(1);
        let every = if self.config.eval_every == 0 { epoch } else { self.config.eval_every };
        let mut summary = RunSummary {
            trace: Vec::new(),
            evals: Vec::new(),
            best_iteration: None,
            best_score: None,
        };
        while self.iteration < max {
            let report = match self.step(train) {
                Ok(r) => r,
                Err(e) => {
                    if let Some(d) = dir.as_deref_mut() {
                        d.save_checkpoint("last_good", &self.checkpoint())?;
                    }
                    return Err(e);
                }
            };
            if let Some(d) = dir.as_deref_mut() {
                d.log(&LogRecord::Step(&report))?;
            }
            log::debug!("iter {} loss {:.4}", report.iteration, report.loss);
            summary.trace.push(report);
            let done = self.iteration == max;
            if !heldout.is_empty() && (self.iteration.is_multiple_of(every) || done) {
                let rec = self.evaluate(heldout, train)?;
                log::info!("iter {} eval score {:.4}", rec.iteration, rec.score);
                if self.best.is_none_or(|(s, _)| rec.score > s) {
                    self.best = Some((rec.score, rec.iteration));
                    self.best_params = Some(self.model.params.clone());
                    if let Some(d) = dir.as_deref_mut() {
                        d.save_checkpoint("best", &self.best_checkpoint())?;
                    }
                }
                if let Some(d) = dir.as_deref_mut() {
                    d.log(&LogRecord::Eval(&rec))?;
                }
                summary.evals.push(rec);
            }
            let periodic = self.config.checkpoint_every > 0 && self.iteration.is_multiple_of(self.config.checkpoint_every);
            if let Some(d) = dir.as_deref_mut() {
                if periodic || done {
                    d.save_checkpoint("last", &self.checkpoint())?;
                }
            }
        }
        if let Some(d) = dir {
            if self.best_params.is_none() {
                d.save_checkpoint("best", &self.best_checkpoint())?;
            }
        }
        summary.best_iteration = self.best.map(|b| b.1);
        summary.best_score = self.best.map(|b| b.0);
        Ok(summary)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainScores {
    pub mlm: Option<f64>,
    pub itm: Option<f64>,
    pub rpp: Option<f64>,
    /// Unweighted mean of the available accuracies.
    pub combined: f64,
}

/// Pre-training task accuracies on `samples`. Masking, pollution and RPP
/// pairs are drawn from per-sample streams fixed by `seed`, so repeated
/// evaluations see identical instances.
pub fn pretrain_accuracy<T: Scalar>(
    model: &TapModel<T>,
    samples: &[Sample],
    pool: &[Sample],
    tasks: &PretrainTasks,
    seed: u64,
    workers: usize,
) -> Result<PretrainScores> {
    let outs = par_map(samples, workers, |i, s| -> Result<[(usize, usize); 3]> {
        let mut r = InstanceRng::new(seed, &[EVAL_KEY, i as u64]);
        let inst = build_pretrain_instance(s, pool, &model.vocab, &mut r, tasks)?;
        let mut g = model.graph();
        let fwd = model.forward(&mut g, &inst.sample, &[DecodeToken::Begin], None)?;
        let out = model.pretrain_outputs(&mut g, &fwd, &inst, tasks.itm);
        Ok(out.terms().map(|t| (t.correct, t.count)))
    });
    let mut sums = [(0usize, 0usize); 3];
    for o in outs {
        for (a, b) in sums.iter_mut().zip(o?) {
            a.0 += b.0;
            a.1 += b.1;
        }
    }
    let acc = sums.map(|(c, n)| (n > 0).then(|| c as f64 / n as f64));
    let present: Vec<f64> = acc.iter().flatten().copied().collect();
    Ok(PretrainScores {
        mlm: acc[0],
        itm: acc[1],
        rpp: acc[2],
        combined: if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        },
    })
}

#[cfg(test)]
mod tests;
