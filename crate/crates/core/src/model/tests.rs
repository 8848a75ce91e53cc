use rand::Rng;

use super::*;
use crate::error::TapError;
use crate::rng::derive_rng;
use crate::sample::{ItmLabel, ObjectRegion, PretrainInstance, RppLabel, RppMode, RppPair, Sample, SceneTextRegion};
use crate::spatial::{BoundingBox, RelativePosition};
use crate::tensor::relative_error;
use crate::text::{assemble_extended_text, TextCaps, END, UNK};

pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        hidden: 8,
        heads: 2,
        intermediate: 12,
        dropout: 0.0,
        visual_dim: 4,
        word_vec_dim: 3,
        phoc_dim: 5,
        ..ModelConfig::default()
    }
}

fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
    BoundingBox::new(x1, y1, x2, y2).unwrap()
}

/// Sample with random features sized for `tiny_config`.
pub(crate) fn tiny_sample(seed: u64, question: &str, labels: &[&str], words: &[&str]) -> Sample {
    let mut rng = derive_rng(seed, &[]);
    let mut feat = |n: usize| -> Vec<f32> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let objects: Vec<ObjectRegion> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| ObjectRegion {
            bbox: bx(0.2 * i as f64, 0.1, 0.2 * i as f64 + 0.15, 0.6),
            label: l.to_string(),
            visual: feat(4),
        })
        .collect();
    let ocr: Vec<SceneTextRegion> = words
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let mut r = SceneTextRegion::new(bx(0.2 * i as f64, 0.2, 0.2 * i as f64 + 0.1, 0.3), *w, feat(4));
            r.word_vec = feat(3);
            r.phoc = feat(5);
            r
        })
        .collect();
    let labels_s: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
    let words_s: Vec<String> = words.iter().map(|s| s.to_string()).collect();
    Sample {
        image_id: format!("img{seed}"),
        question: question.into(),
        text: assemble_extended_text(question, &labels_s, &words_s, &TextCaps::default()),
        objects,
        ocr,
        answers: None,
        caption: None,
    }
}

fn vocab() -> Vocabulary {
    Vocabulary::build(["what", "is", "on", "the", "sign", "car", "stop", "exit", "yes"], 1)
}

fn answers() -> Vocabulary {
    Vocabulary::build(["yes", "no", "stop"], 1)
}

fn model_f64(variant: Variant, seed: u64) -> TapModel<f64> {
    TapModel::new(tiny_config().with_variant(variant), vocab(), answers(), seed).unwrap()
}

fn sample() -> Sample {
    tiny_sample(7, "what is on the sign", &["sign", "car"], &["stop", "exit", "zebra"])
}

fn set(m: &mut TapModel<f64>, name: &str, f: impl Fn(usize, usize) -> f64) {
    let id = m.params.id(name).unwrap_or_else(|| panic!("no param {name}"));
    let p = m.params.get_mut(id);
    for r in 0..p.rows {
        for c in 0..p.cols {
            p.data[r * p.cols + c] = f(r, c);
        }
    }
}

#[test]
fn fused_shape_covers_every_position() {
    for variant in [Variant::Text3Fusion4, Variant::Fusion12] {
        let m = model_f64(variant, 1);
        let s = sample();
        let slots = [DecodeToken::Begin, DecodeToken::Vocab(5), DecodeToken::Ocr(1)];
        let mut g = m.graph();
        let fwd = m.forward(&mut g, &s, &slots, None).unwrap();
        let k = s.text.len();
        assert_eq!(g.shape(fwd.fused), (k + 2 + 3 + 3, 8));
        let f = fwd.features(&g);
        assert_eq!(f.words.shape(), (k, 8));
        assert_eq!(f.objects.shape(), (2, 8));
        assert_eq!(f.ocr.shape(), (3, 8));
        assert_eq!(f.slots.shape(), (3, 8));
        let maps = fwd.attention_maps(&g);
        assert_eq!(maps.num_maps(), m.config.mm_layers() * 2);
    }
}

#[test]
fn zero_region_inputs_take_the_bias_path() {
    let mut m = model_f64(Variant::Text3Fusion4, 2);
    let mut rng = derive_rng(9, &[]);
    for name in ["embed.obj_vis.b", "embed.obj_box.b", "embed.obj_vis_ln.gamma", "embed.obj_box_ln.beta"] {
        let vals: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        set(&mut m, name, |_, c| vals[c]);
    }
    let mut s = sample();
    s.objects[0].visual = vec![0.0; 4];
    s.objects[0].bbox = BoundingBox::new(0.0, 0.0, 1e-300, 1e-300).unwrap();
    let mut g = m.graph();
    let fwd = m.forward(&mut g, &s, &[DecodeToken::Begin], None).unwrap();
    let row = g.value(fwd.embedded).row(fwd.layout.object_range().start).to_vec();

    let ln = |x: &[f64], gamma: &[f64], beta: &[f64]| -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        x.iter()
            .zip(gamma.iter().zip(beta))
            .map(|(v, (g, b))| (v - mean) / (var + 1e-12).sqrt() * g + b)
            .collect()
    };
    let p = |n: &str| m.params.get(m.params.id(n).unwrap()).data.clone();
    let a = ln(&p("embed.obj_vis.b"), &p("embed.obj_vis_ln.gamma"), &p("embed.obj_vis_ln.beta"));
    let b = ln(&p("embed.obj_box.b"), &p("embed.obj_box_ln.gamma"), &p("embed.obj_box_ln.beta"));
    for c in 0..8 {
        assert!((row[c] - (a[c] + b[c])).abs() < 1e-9, "column {c}");
    }
}

#[test]
fn identical_ocr_regions_embed_identically() {
    let m = model_f64(Variant::Text3Fusion4, 3);
    let mut s = sample();
    s.ocr[2] = s.ocr[0].clone();
    let mut g = m.graph();
    let fwd = m.forward(&mut g, &s, &[DecodeToken::Begin], None).unwrap();
    let r = fwd.layout.ocr_range();
    let e = g.value(fwd.embedded);
    assert_eq!(e.row(r.start), e.row(r.start + 2));
    let f = g.value(fwd.fused);
    for (a, b) in f.row(r.start).iter().zip(f.row(r.start + 2)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn permuting_objects_permutes_their_rows() {
    for variant in [Variant::Text3Fusion4, Variant::Fusion12] {
        let m = model_f64(variant, 4);
        let s = sample();
        let mut t = s.clone();
        t.objects.swap(0, 1);
        let run = |s: &Sample| {
            let mut g = m.graph();
            let fwd = m.forward(&mut g, s, &[DecodeToken::Begin], None).unwrap();
            fwd.features(&g)
        };
        let (a, b) = (run(&s), run(&t));
        let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-10);
        assert!(close(a.objects.row(0), b.objects.row(1)));
        assert!(close(a.objects.row(1), b.objects.row(0)));
        assert!(close(&a.words.data, &b.words.data));
        assert!(close(&a.ocr.data, &b.ocr.data));
    }
}

#[test]
fn attention_rows_are_distributions_and_respect_slot_mask() {
    let m = model_f64(Variant::Text3Fusion4, 5);
    let slots = [DecodeToken::Begin, DecodeToken::Vocab(6), DecodeToken::Ocr(0)];
    let mut g = m.graph();
    let fwd = m.forward(&mut g, &sample(), &slots, None).unwrap();
    let maps = fwd.attention_maps(&g);
    let enc = fwd.layout.encoder_len();
    for map in maps.iter() {
        for r in 0..map.rows {
            let row = map.row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|&v| v >= 0.0));
            for (c, &v) in row.iter().enumerate() {
                let allowed = c < enc || (r >= enc && c <= r);
                if !allowed {
                    assert_eq!(v, 0.0, "row {r} col {c}");
                }
            }
        }
    }
}

#[test]
fn encoder_features_ignore_decode_inputs() {
    let m = model_f64(Variant::Text3Fusion4, 6);
    let s = sample();
    let run = |slots: &[DecodeToken]| {
        let mut g = m.graph();
        let fwd = m.forward(&mut g, &s, slots, None).unwrap();
        fwd.features(&g)
    };
    let a = run(&[DecodeToken::Begin]);
    let b = run(&[DecodeToken::Begin, DecodeToken::Ocr(2), DecodeToken::Vocab(7)]);
    assert_eq!(a.words, b.words);
    assert_eq!(a.ocr, b.ocr);
    assert_eq!(a.slots.row(0), b.slots.row(0));
}

#[test]
fn single_position_attends_to_itself() {
    let m = model_f64(Variant::Fusion12, 7);
    let mut s = tiny_sample(1, "", &[], &[]);
    s.text = Default::default();
    let mut g = m.graph();
    let fwd = m.forward(&mut g, &s, &[DecodeToken::Begin], None).unwrap();
    for map in fwd.attention_maps(&g).iter() {
        assert_eq!(map.data, vec![1.0]);
    }
}

#[test]
fn dimension_mismatch_names_the_field() {
    let m = model_f64(Variant::Text3Fusion4, 8);
    let mut s = sample();
    s.ocr[1].phoc.push(0.0);
    let mut g = m.graph();
    let err = m.forward(&mut g, &s, &[DecodeToken::Begin], None).unwrap_err();
    assert!(err.to_string().contains("model.phoc_dim"), "{err}");
    let mut s = sample();
    s.objects[0].visual.pop();
    let err = m.forward(&mut g, &s, &[DecodeToken::Begin], None).unwrap_err();
    assert!(err.to_string().contains("model.visual_dim"), "{err}");
}

#[test]
fn nan_weights_abort_with_layer_number() {
    let mut m = model_f64(Variant::Text3Fusion4, 9);
    set(&mut m, "mm.1.ff2.b", |_, _| f64::NAN);
    let mut g = m.graph();
    let err = m.forward(&mut g, &sample(), &[DecodeToken::Begin], None).unwrap_err();
    assert!(matches!(err, TapError::NumericDivergence { layer: 4 }), "{err}");
    assert_eq!(err.to_string(), "numeric divergence at layer 4");
}

#[test]
fn dropout_only_in_training_mode() {
    let mut cfg = tiny_config();
    cfg.dropout = 0.3;
    let m: TapModel<f64> = TapModel::new(cfg, vocab(), answers(), 3).unwrap();
    let s = sample();
    let eval = |m: &TapModel<f64>| {
        let mut g = m.graph();
        let f = m.forward(&mut g, &s, &[DecodeToken::Begin], None).unwrap();
        g.value(f.fused).clone()
    };
    assert_eq!(eval(&m), eval(&m));
    let mut rng = derive_rng(1, &[]);
    let mut g = m.graph();
    let f = m.forward(&mut g, &s, &[DecodeToken::Begin], Some(&mut rng)).unwrap();
    assert_ne!(g.value(f.fused), &eval(&m));
}

fn instance(s: &Sample, rpp_mode: RppMode) -> PretrainInstance {
    PretrainInstance {
        sample: s.clone(),
        mask_positions: vec![0, 3, s.text.len() - 1],
        mask_targets: vec!["what".into(), "the".into(), "zebra".into()],
        itm_label: ItmLabel::Polluted,
        polluted_part: None,
        rpp: Some(RppPair {
            object: 1,
            ocr: 2,
            label: match rpp_mode {
                RppMode::Binary => RppLabel::On(true),
                RppMode::Relation => RppLabel::Relation(RelativePosition::SE),
            },
        }),
    }
}

fn random_entries(m: &TapModel<f64>, prefix: &str, n: usize, seed: u64) -> Vec<(ParamId, usize)> {
    let ids: Vec<ParamId> = m.params.ids().filter(|&id| m.params.name(id).starts_with(prefix)).collect();
    assert!(!ids.is_empty(), "no parameters under {prefix}");
    let mut rng = derive_rng(seed, &[]);
    (0..n)
        .map(|_| {
            let id = ids[rng.random_range(0..ids.len())];
            (id, rng.random_range(0..m.params.get(id).len()))
        })
        .collect()
}

fn assert_grads(pairs: Vec<(f64, f64)>) {
    for (a, n) in pairs {
        assert!(relative_error(a, n, 1e-6) < 1e-4, "analytic {a} numeric {n}");
    }
}

#[test]
fn head_and_layer_gradients_match_finite_differences() {
    for mode in [RppMode::Relation, RppMode::Binary] {
        let mut cfg = tiny_config();
        cfg.rpp_mode = mode;
        let mut m: TapModel<f64> = TapModel::new(cfg, vocab(), answers(), 11).unwrap();
        let s = sample();
        let inst = instance(&s, mode);
        for (k, prefix) in ["head.mlm", "head.itm", "head.rpp", "mm.2.", "text.0.", "embed."].iter().enumerate() {
            let entries = random_entries(&m, prefix, 10, k as u64);
            let pairs = m.finite_difference_check(&entries, 1e-5, |m, g| {
                let fwd = m.forward(g, &inst.sample, &[DecodeToken::Begin], None).unwrap();
                let out = m.pretrain_outputs(g, &fwd, &inst, true);
                let terms: Vec<(Var, f64)> = out.terms().iter().filter_map(|t| t.loss).map(|l| (l, 1.0)).collect();
                g.weighted_sum(&terms)
            });
            assert_grads(pairs);
        }
    }
}

#[test]
fn decoder_gradients_match_finite_differences() {
    let mut m = model_f64(Variant::Text3Fusion4, 12);
    let s = sample();
    let t = answer_targets::<f64>("stop zebra yes", &m.answer_vocab, &s.ocr.iter().map(|r| r.word.clone()).collect::<Vec<_>>(), 12);
    for (k, prefix) in ["decoder.", "slots.", "mm.0."].iter().enumerate() {
        let entries = random_entries(&m, prefix, 10, 40 + k as u64);
        let pairs = m.finite_difference_check(&entries, 1e-5, |m, g| {
            let fwd = m.forward(g, &s, &t.inputs, None).unwrap();
            m.decode_loss(g, &fwd, &t)
        });
        assert_grads(pairs);
    }
}

#[test]
fn head_output_sizes() {
    let m = model_f64(Variant::Text3Fusion4, 13);
    let mut g = m.graph();
    let fwd = m.forward(&mut g, &sample(), &[DecodeToken::Begin], None).unwrap();
    let l = m.mlm_logits(&mut g, &fwd, &[1, 2]);
    assert_eq!(g.shape(l), (2, m.vocab.len()));
    let i = m.itm_logit(&mut g, &fwd);
    assert_eq!(g.shape(i), (1, 1));
    let r = m.rpp_logits(&mut g, &fwd, 0, 1);
    assert_eq!(g.shape(r), (1, 12));
    // stateless: the same pair gives the same logits in any order
    let r2 = m.rpp_logits(&mut g, &fwd, 1, 2);
    let r3 = m.rpp_logits(&mut g, &fwd, 0, 1);
    assert_eq!(g.value(r), g.value(r3));
    assert_ne!(g.value(r), g.value(r2));
}

#[test]
fn itm_loss_is_ln2_at_zero_logit() {
    let mut m = model_f64(Variant::Text3Fusion4, 14);
    set(&mut m, "head.itm.w", |_, _| 0.0);
    let s = sample();
    let mut total = 0.0;
    for label in [ItmLabel::Matched, ItmLabel::Polluted] {
        let mut inst = instance(&s, RppMode::Relation);
        inst.itm_label = label;
        let mut g = m.graph();
        let fwd = m.forward(&mut g, &s, &[DecodeToken::Begin], None).unwrap();
        let out = m.pretrain_outputs(&mut g, &fwd, &inst, true);
        total += g.value(out.itm.loss.unwrap()).data[0];
    }
    assert!((total / 2.0 - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn targets_allow_several_positives() {
    let av = answers();
    let ocr = vec!["Stop".to_string(), "exit".into(), "stop".into()];
    let t = answer_targets::<f64>("stop exit qq", &av, &ocr, 12);
    let a = av.len();
    assert_eq!(t.targets.shape(), (4, a + 3));
    let stop = av.id("stop");
    let pos = |r: usize| -> Vec<usize> { (0..a + 3).filter(|&c| t.targets.get(r, c) == 1.0).collect() };
    assert_eq!(pos(0), vec![stop, a, a + 2]);
    assert_eq!(pos(1), vec![a + 1]);
    assert_eq!(pos(2), vec![UNK]);
    assert_eq!(pos(3), vec![END]);
    assert_eq!(
        t.inputs,
        vec![DecodeToken::Begin, DecodeToken::Ocr(0), DecodeToken::Ocr(1), DecodeToken::Vocab(UNK)]
    );
    let short = answer_targets::<f64>("a b c d", &av, &ocr, 2);
    assert_eq!(short.targets.rows, 2);
    assert_eq!(short.inputs.len(), 2);
}

#[test]
fn empty_ocr_scores_fixed_vocab_only() {
    let m = model_f64(Variant::Text3Fusion4, 15);
    let s = tiny_sample(3, "what is it", &["car"], &[]);
    let state = DecoderState::new();
    let scores = m.decode_step(&s, &state, DecodeMode::Vqa).unwrap();
    assert_eq!(scores.len(), m.answer_vocab.len());
}

/// Zeroes every residual branch so each fused row is a row-wise function of
/// its own input embedding.
fn flatten_fusion(m: &mut TapModel<f64>) {
    let names: Vec<String> = m
        .params
        .iter()
        .map(|(n, _)| n.to_string())
        .filter(|n| n.starts_with("mm.") && (n.contains(".attn.o.") || n.contains(".ff2.")))
        .collect();
    for n in names {
        set(m, &n, |_, _| 0.0);
    }
}

#[test]
fn planted_pointer_copies_out_of_vocabulary_word() {
    let mut m = model_f64(Variant::Text3Fusion4, 16);
    flatten_fusion(&mut m);
    let mut s = sample();
    let target = 2; // "zebra", absent from the answer vocabulary
    assert!(!m.answer_vocab.contains("zebra"));
    for (i, r) in s.ocr.iter_mut().enumerate() {
        r.visual[0] = if i == target { 1.0 } else { -1.0 };
    }
    set(&mut m, "embed.ocr_feat.w", |r, c| if r == 0 && c == 0 { 10.0 } else { 0.0 });
    set(&mut m, "embed.ocr_feat.b", |_, c| 0.01 * c as f64);
    set(&mut m, "embed.ocr_box.w", |_, _| 0.0);
    set(&mut m, "decoder.cls.w", |_, _| 0.0);
    set(&mut m, "decoder.cls.b", |_, _| -100.0);
    set(&mut m, "decoder.ptr_k.w", |r, c| if r == 0 && c == 0 { 1.0 } else { 0.0 });
    set(&mut m, "decoder.ptr_k.b", |_, _| 0.0);
    set(&mut m, "decoder.ptr_q.w", |_, _| 0.0);
    set(&mut m, "decoder.ptr_q.b", |_, c| if c == 0 { 10.0 } else { 0.0 });

    let a = m.answer_vocab.len();
    let scores = m.decode_step(&s, &DecoderState::new(), DecodeMode::Vqa).unwrap();
    let best = (0..scores.len()).max_by(|&i, &j| scores[i].total_cmp(&scores[j])).unwrap();
    assert_eq!(best, a + target);

    let words: Vec<String> = s.ocr.iter().map(|r| r.word.clone()).collect();
    let loss = |m: &TapModel<f64>, answer: &str| {
        let t = answer_targets::<f64>(answer, &m.answer_vocab, &words, 1);
        let mut g = m.graph();
        let fwd = m.forward(&mut g, &s, &t.inputs, None).unwrap();
        let l = m.decode_loss(&mut g, &fwd, &t);
        g.value(l).data[0]
    };
    assert!(loss(&m, "zebra") < loss(&m, "stop"));

    let out = m.decode_answer(&s, DecodeMode::Vqa).unwrap();
    assert_eq!(out.words[0], "zebra");
    assert_eq!(out.tokens[0], DecodeToken::Ocr(target));
}

#[test]
fn end_first_gives_empty_answer_and_limits_hold() {
    let mut m = model_f64(Variant::Text3Fusion4, 17);
    set(&mut m, "decoder.cls.w", |_, _| 0.0);
    set(&mut m, "decoder.ptr_q.w", |_, _| 0.0);
    set(&mut m, "decoder.ptr_q.b", |_, _| 0.0);
    set(&mut m, "decoder.cls.b", |_, c| if c == END { 50.0 } else { -50.0 });
    let s = sample();
    let out = m.decode_answer(&s, DecodeMode::Vqa).unwrap();
    assert!(out.words.is_empty() && out.text().is_empty());

    let yes = m.answer_vocab.id("yes");
    set(&mut m, "decoder.cls.b", |_, c| if c == yes { 50.0 } else { -50.0 });
    let vqa = m.decode_answer(&s, DecodeMode::Vqa).unwrap();
    assert_eq!(vqa.words.len(), 12);
    assert!(vqa.words.iter().all(|w| w == "yes"));
    let cap = m.decode_answer(&s, DecodeMode::Caption).unwrap();
    assert_eq!(cap.words.len(), 30);
}

#[test]
fn reset_decoder_keeps_encoder_weights() {
    let m0 = model_f64(Variant::Text3Fusion4, 18);
    let mut m = model_f64(Variant::Text3Fusion4, 18);
    let bigger = Vocabulary::build(["yes", "no", "stop", "go", "left"], 1);
    m.reset_decoder(bigger, 99).unwrap();
    for (name, v) in m.params.iter() {
        let old = m0.params.get(m0.params.id(name).unwrap());
        if name.starts_with(DECODER_PREFIX) {
            // biases start at zero either way
            if !name.ends_with(".b") {
                assert_ne!(v, old, "{name} should be fresh");
            }
        } else {
            assert_eq!(v, old, "{name} should be kept");
        }
    }
    let cls = m.params.get(m.params.id("decoder.cls.w").unwrap());
    assert_eq!(cls.cols, 10);
    m.decode_answer(&sample(), DecodeMode::Vqa).unwrap();
}

#[test]
fn truncated_normal_init() {
    let m = TapModel::<f32>::new(ModelConfig::desk(), vocab(), answers(), 1).unwrap();
    let w = m.params.get(m.params.id("mm.0.attn.q.w").unwrap());
    assert!(w.data.iter().all(|v| v.abs() <= 0.04 + 1e-7));
    let mean = w.data.iter().sum::<f32>() / w.len() as f32;
    assert!(mean.abs() < 2e-3);
    let b = m.params.get(m.params.id("mm.0.attn.q.b").unwrap());
    assert!(b.data.iter().all(|&v| v == 0.0));
    let same = TapModel::<f32>::new(ModelConfig::desk(), vocab(), answers(), 1).unwrap();
    assert_eq!(m.params, same.params);
}

#[test]
fn majority_answer_prefers_most_votes() {
    let a: Vec<String> = ["x", "y", "y", "x", "y"].iter().map(|s| s.to_string()).collect();
    assert_eq!(majority_answer(&a), Some("y"));
    assert_eq!(majority_answer(&[]), None);
}
