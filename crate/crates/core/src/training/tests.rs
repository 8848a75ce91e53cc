use super::*;
use crate::model::tests::{tiny_config, tiny_sample};
use crate::sample::RppMode;
use crate::text::Segment;

const WORDS: [&str; 6] = ["stop", "exit", "cafe", "bank", "zebra", "open"];

fn dataset(n: usize) -> Vec<Sample> {
    (0..n)
        .map(|i| {
            let a = WORDS[i % WORDS.len()];
            let b = WORDS[(i + 2) % WORDS.len()];
            let mut s = tiny_sample(100 + i as u64, "what does the sign say", &["sign", "car"], &[a, b]);
            s.answers = Some(vec![a.to_string(); 10]);
            s.caption = Some(format!("a sign that says {a}"));
            s
        })
        .collect()
}

fn text_vocab(data: &[Sample]) -> Vocabulary {
    build_text_vocab(data, 1)
}

fn config(batch: usize, iters: usize) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.schedule.batch_size = batch;
    c.schedule.max_iters = iters;
    c.schedule.warmup_iters = 2;
    c.schedule.decay_steps = vec![];
    c
}

fn pretrainer<T: Scalar>(data: &[Sample], cfg: TrainConfig, seed: u64) -> Trainer<T> {
    let model = TapModel::new(tiny_config(), text_vocab(data), Vocabulary::reserved_only(), 11).unwrap();
    Trainer::new(model, Task::Pretrain, cfg, seed).unwrap()
}

fn answer_trainer(data: &[Sample], task: Task, cfg: TrainConfig, seed: u64) -> Trainer<f64> {
    let mut model = TapModel::new(tiny_config(), text_vocab(data), Vocabulary::reserved_only(), 11).unwrap();
    let mode = cfg.answer_mode(task).unwrap();
    prepare_answer_model(&mut model, data, mode, 1, seed).unwrap();
    Trainer::new(model, task, cfg, seed).unwrap()
}

fn trace<T: Scalar>(t: &mut Trainer<T>, data: &[Sample], n: usize) -> Vec<StepReport> {
    (0..n).map(|_| t.step(data).unwrap()).collect()
}

#[test]
fn same_seed_same_trace() {
    let data = dataset(12);
    let a = trace(&mut pretrainer::<f32>(&data, config(4, 20), 5), &data, 10);
    let b = trace(&mut pretrainer::<f32>(&data, config(4, 20), 5), &data, 10);
    assert_eq!(a, b);
    let c = trace(&mut pretrainer::<f32>(&data, config(4, 20), 6), &data, 10);
    assert_ne!(a, c);
}

#[test]
fn worker_count_does_not_change_results() {
    let data = dataset(12);
    let one = trace(&mut pretrainer::<f64>(&data, config(5, 20), 5), &data, 3);
    let mut cfg = config(5, 20);
    cfg.workers = 3;
    let three = trace(&mut pretrainer::<f64>(&data, cfg, 5), &data, 3);
    assert_eq!(one, three);
}

#[test]
fn clipped_norm_never_exceeds_limit() {
    let data = dataset(10);
    let mut t = pretrainer::<f32>(&data, config(4, 20), 1);
    for r in trace(&mut t, &data, 8) {
        assert!(r.clipped_norm <= 0.25 + 1e-6, "{r:?}");
        assert!(r.grad_norm >= r.clipped_norm - 1e-6);
        assert!(r.loss.is_finite());
    }
}

#[test]
fn zero_learning_rate_freezes_parameters_and_probe_loss() {
    let data = dataset(10);
    let mut cfg = config(4, 20);
    cfg.schedule.base_lr = 0.0;
    let mut t = pretrainer::<f32>(&data, cfg, 2);
    let before = t.model.params.clone();
    let probe = t.probe(&data, &[0, 3, 5, 7], 0).unwrap();
    for _ in 0..5 {
        t.step(&data).unwrap();
        assert_eq!(t.model.params, before);
        assert_eq!(t.probe(&data, &[0, 3, 5, 7], 0).unwrap().loss, probe.loss);
    }
}

#[test]
fn joint_split_fraction_is_near_half() {
    let mut pre = 0usize;
    for it in 0..1000 {
        pre += joint_split(9, it, 8, 0.5).into_iter().filter(|&b| b).count();
    }
    let frac = pre as f64 / 8000.0;
    assert!((frac - 0.5).abs() <= 0.02, "{frac}");
    assert!(joint_split(9, 0, 50, 0.0).iter().all(|b| !b));
    assert!(joint_split(9, 0, 50, 1.0).iter().all(|&b| b));
}

#[test]
fn joint_with_fraction_zero_is_finetune() {
    let data = dataset(12);
    let mut cfg = config(4, 20);
    cfg.joint_fraction = 0.0;
    let joint = trace(&mut answer_trainer(&data, Task::Joint, cfg, 4), &data, 5);
    let fine = trace(&mut answer_trainer(&data, Task::FinetuneVqa, config(4, 20), 4), &data, 5);
    assert_eq!(joint, fine);
    assert!(fine.iter().all(|r| r.mlm.is_none() && r.answer.is_some()));
}

#[test]
fn joint_with_fraction_one_is_pretrain() {
    let data = dataset(12);
    let mut cfg = config(4, 20);
    cfg.joint_fraction = 1.0;
    let mut joint = answer_trainer(&data, Task::Joint, cfg, 4);
    let model = TapModel::new(tiny_config(), text_vocab(&data), Vocabulary::reserved_only(), 11).unwrap();
    let mut pre = Trainer::new(model, Task::Pretrain, config(4, 20), 4).unwrap();
    let a = trace(&mut joint, &data, 5);
    let b = trace(&mut pre, &data, 5);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((x.loss, x.mlm, x.itm, x.rpp), (y.loss, y.mlm, y.itm, y.rpp));
        assert!(x.answer.is_none());
    }
    for (name, m) in pre.model.params.iter().filter(|(n, _)| !n.starts_with(crate::model::DECODER_PREFIX)) {
        let id = joint.model.params.id(name).unwrap();
        assert_eq!(joint.model.params.get(id), m, "{name}");
    }
}

#[test]
fn resume_is_bitwise_identical() {
    let data = dataset(12);
    let mut full = pretrainer::<f64>(&data, config(4, 20), 8);
    trace(&mut full, &data, 5);
    let bytes = full.checkpoint().to_bytes().unwrap();
    let tail = trace(&mut full, &data, 5);
    let ck = Checkpoint::<f64>::from_bytes(&bytes, Some(&full.model.config)).unwrap();
    let mut resumed = Trainer::resume(ck, Task::Pretrain, config(4, 20)).unwrap();
    assert_eq!(resumed.iteration, 5);
    assert_eq!(trace(&mut resumed, &data, 5), tail);
    assert_eq!(resumed.model.params, full.model.params);
}

#[test]
fn answer_vocab_leaves_copyable_words_to_the_pointer() {
    let data = dataset(6);
    let v = build_answer_vocab(&data, DecodeMode::Vqa, 1);
    assert_eq!(v.regular_len(), 0);
    let c = build_answer_vocab(&data, DecodeMode::Caption, 1);
    for w in ["sign", "that", "says"] {
        assert!(c.contains(w), "{w}");
    }
    assert!(!c.contains("stop"));
}

#[test]
fn caption_items_blank_the_question() {
    let data = dataset(3);
    let v = build_answer_vocab(&data, DecodeMode::Caption, 1);
    let (s, t) = answer_item::<f64>(&data[0], DecodeMode::Caption, &v, 30).unwrap();
    assert!(s.text.part(Segment::Question).is_empty());
    assert_eq!(s.text.part(Segment::Ocr), data[0].text.part(Segment::Ocr));
    assert_eq!(t.targets.rows, 6);
    let mut bare = data[0].clone();
    bare.answers = None;
    assert!(answer_item::<f64>(&bare, DecodeMode::Vqa, &v, 12).is_err());
}

#[test]
fn heldout_split_is_deterministic_and_disjoint() {
    let data = dataset(20);
    let (a, b) = split_heldout(&data, 0.1, 3);
    assert_eq!((a.len(), b.len()), (18, 2));
    assert_eq!(split_heldout(&data, 0.1, 3), (a.clone(), b.clone()));
    assert!(b.iter().all(|s| !a.iter().any(|t| t.image_id == s.image_id)));
    assert_eq!(split_heldout(&data[..3], 0.01, 3).1.len(), 1);
    assert!(split_heldout(&data, 0.0, 3).1.is_empty());
}

#[test]
fn config_rejects_bad_values() {
    let m = tiny_config();
    let mut c = TrainConfig::default();
    c.tasks.rpp_mode = RppMode::Binary;
    let e = c.validate(&m).err().unwrap();
    assert!(e.to_string().contains("train.tasks.rpp_mode"), "{e}");
    let mut c = TrainConfig::default();
    c.joint_fraction = 1.5;
    assert!(c.validate(&m).is_err());
    let mut c = TrainConfig::default();
    c.clip_norm = 0.0;
    assert!(c.validate(&m).is_err());
}

#[test]
fn run_writes_logs_and_checkpoints() {
    let data = dataset(12);
    let (train, held) = split_heldout(&data, 0.25, 1);
    let mut cfg = config(4, 6);
    cfg.eval_every = 3;
    let mut t = pretrainer::<f32>(&train, cfg, 3);
    let dir = tempfile::tempdir().unwrap();
    let mut rd = RunDir::create(&dir.path().join("run"), false).unwrap();
    let summary = t.run(&train, &held, Some(&mut rd)).unwrap();
    assert_eq!(summary.trace.len(), 6);
    assert_eq!(summary.evals.len(), 2);
    assert!(summary.best_score.is_some());
    for name in ["best", "last"] {
        assert!(rd.checkpoint_path(name).exists(), "{name}");
    }
    let log = std::fs::read_to_string(rd.root().join(METRICS_FILE)).unwrap();
    assert_eq!(log.lines().count(), 8);
    assert!(log.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()));
    let best = Checkpoint::<f32>::load(&rd.checkpoint_path("best"), Some(&t.model.config)).unwrap();
    assert_eq!(best.model.params, t.best_model().params);
}

#[test]
fn divergence_keeps_last_good_checkpoint() {
    let data = dataset(8);
    let mut t = pretrainer::<f32>(&data, config(2, 10), 3);
    trace(&mut t, &data, 2);
    let id = t.model.params.id("mm.1.ff1.w").unwrap();
    t.model.params.get_mut(id).data[0] = f32::NAN;
    let dir = tempfile::tempdir().unwrap();
    let mut rd = RunDir::create(dir.path(), false).unwrap();
    let err = t.run(&data, &[], Some(&mut rd)).err().unwrap();
    assert!(matches!(err, TapError::NumericDivergence { .. }), "{err}");
    let ck = Checkpoint::<f32>::load(&rd.checkpoint_path("last_good"), None).unwrap();
    assert_eq!(ck.trainer.unwrap().iteration, 2);
}

#[test]
fn finetune_runs_from_random_checkpoint_and_reports_metrics() {
    let data = dataset(12);
    let (train, held) = split_heldout(&data, 0.25, 1);
    let mut t = answer_trainer(&train, Task::FinetuneVqa, config(4, 3), 2);
    let s = t.run(&train, &held, None).unwrap();
    let last = s.evals.last().unwrap();
    assert!(last.metrics.contains_key("accuracy") && last.metrics.contains_key("anls"));
    assert!(s.trace.iter().all(|r| r.answer.is_some()));
}
