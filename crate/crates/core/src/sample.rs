//! Samples and pre-training instances: MLM masking, ITM pollution and RPP
//! pair sampling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TapError};
use crate::rng::derive_rng;
use crate::spatial::{classify_relation_with, BoundingBox, RelationThresholds, RelativePosition};
use crate::text::{ocr_token, ExtendedText, PhocEncoder, Segment, TextCaps, Vocabulary, WordVectorProvider, RESERVED};

pub const MAX_OBJECTS: usize = 100;
pub const MAX_OCR: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRegion {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub label: String,
    pub visual: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTextRegion {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub word: String,
    pub visual: Vec<f32>,
    /// Filled by [`Featurizer::featurize`]; derived from `word`, so not stored.
    #[serde(skip)]
    pub word_vec: Vec<f32>,
    #[serde(skip)]
    pub phoc: Vec<f32>,
}

impl SceneTextRegion {
    pub fn new(bbox: BoundingBox, word: impl Into<String>, visual: Vec<f32>) -> Self {
        Self {
            bbox,
            word: word.into(),
            visual,
            word_vec: Vec::new(),
            phoc: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub image_id: String,
    #[serde(default)]
    pub question: String,
    pub text: ExtendedText,
    pub objects: Vec<ObjectRegion>,
    pub ocr: Vec<SceneTextRegion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

impl Sample {
    /// Checks caps, feature dimensions and the `w^ocr` / OCR region
    /// correspondence.
    pub fn validate(&self, caps: &TextCaps, visual_dim: usize) -> Result<()> {
        let bad = |m: String| Err(TapError::Schema(format!("sample {}: {m}", self.image_id)));
        for s in Segment::ALL {
            if self.text.part(s).len() > caps.cap(s) {
                return bad(format!("{s:?} part exceeds cap {}", caps.cap(s)));
            }
        }
        if self.objects.len() > MAX_OBJECTS || self.ocr.len() > MAX_OCR {
            return bad("too many regions".into());
        }
        for o in &self.objects {
            if o.label.is_empty() {
                return bad("empty object label".into());
            }
            if o.visual.len() != visual_dim {
                return bad(format!("object feature dim {} != {visual_dim}", o.visual.len()));
            }
        }
        for r in &self.ocr {
            if r.word.is_empty() {
                return bad("empty OCR word".into());
            }
            if r.visual.len() != visual_dim {
                return bad(format!("OCR feature dim {} != {visual_dim}", r.visual.len()));
            }
        }
        if !self.ocr_text_aligned(caps) {
            return bad("w^ocr does not match the OCR region words".into());
        }
        Ok(())
    }

    /// `w^ocr` equals the (truncated) OCR word list, token for token.
    pub fn ocr_text_aligned(&self, caps: &TextCaps) -> bool {
        let expected: Vec<String> = self.ocr.iter().take(caps.ocr).map(|r| ocr_token(&r.word)).collect();
        self.text.ocr == expected
    }

    pub fn is_featurized(&self) -> bool {
        self.ocr.iter().all(|r| !r.word_vec.is_empty() && !r.phoc.is_empty())
    }
}

/// Computes the word-derived OCR features (word vector and PHOC).
pub struct Featurizer {
    pub words: Box<dyn WordVectorProvider>,
    pub phoc: PhocEncoder,
}

impl Featurizer {
    pub fn new(words: Box<dyn WordVectorProvider>, phoc: PhocEncoder) -> Self {
        Self { words, phoc }
    }

    pub fn featurize(&self, sample: &mut Sample) {
        for r in &mut sample.ocr {
            r.word_vec = self.words.vector(&r.word);
            r.phoc = self.phoc.encode(&r.word).to_f32();
        }
    }

    pub fn featurize_all(&self, samples: &mut [Sample]) {
        for s in samples {
            self.featurize(s);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub prob: f64,
    pub replace_mask: f64,
    pub replace_random: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            prob: 0.15,
            replace_mask: 0.8,
            replace_random: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlmMask {
    pub text: ExtendedText,
    pub positions: Vec<usize>,
    pub targets: Vec<String>,
}

/// Selects each token independently with `cfg.prob`; a selected token becomes
/// `[MASK]` (`replace_mask`), a uniformly random regular vocabulary token
/// (`replace_random`), or stays unchanged. Targets are the original tokens.
pub fn apply_mlm_mask<R: Rng + ?Sized>(
    text: &ExtendedText,
    vocab: &Vocabulary,
    rng: &mut R,
    cfg: &MaskConfig,
) -> MlmMask {
    let mut out = text.clone();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    let regular = vocab.regular_len();
    for pos in 0..text.len() {
        if rng.random::<f64>() >= cfg.prob {
            continue;
        }
        let original = text.token(pos).expect("position in range").to_string();
        let u = rng.random::<f64>();
        if u < cfg.replace_mask {
            out.set_token(pos, RESERVED[crate::text::MASK].to_string());
        } else if u < cfg.replace_mask + cfg.replace_random && regular > 0 {
            let id = RESERVED.len() + rng.random_range(0..regular);
            out.set_token(pos, vocab.token(id).expect("id in range").to_string());
        }
        positions.push(pos);
        targets.push(original);
    }
    MlmMask {
        text: out,
        positions,
        targets,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ItmLabel {
    Matched,
    Polluted,
}

#[derive(Debug, Clone)]
pub struct Pollution {
    pub sample: Sample,
    pub label: ItmLabel,
    pub part: Option<Segment>,
}

/// With probability `prob`, replaces one non-empty text part (chosen
/// uniformly) with the same part of a different-image sample from `pool`.
/// Visual regions are never touched.
pub fn apply_itm_pollution<R: Rng + ?Sized>(
    sample: &Sample,
    pool: &[Sample],
    rng: &mut R,
    prob: f64,
) -> Result<Pollution> {
    let unchanged = Pollution {
        sample: sample.clone(),
        label: ItmLabel::Matched,
        part: None,
    };
    if prob <= 0.0 {
        return Ok(unchanged);
    }
    if !pool.iter().any(|p| p.image_id != sample.image_id) {
        return Err(TapError::PollutionPoolExhausted(sample.image_id.clone()));
    }
    if rng.random::<f64>() >= prob {
        return Ok(unchanged);
    }
    let parts: Vec<Segment> = Segment::ALL
        .into_iter()
        .filter(|s| !sample.text.part(*s).is_empty())
        .collect();
    if parts.is_empty() {
        return Ok(unchanged);
    }
    let part = parts[rng.random_range(0..parts.len())];
    let own = sample.text.part(part);
    // prefer donors whose part actually differs
    let mut donors: Vec<&Sample> = pool
        .iter()
        .filter(|p| p.image_id != sample.image_id && p.text.part(part) != own)
        .collect();
    if donors.is_empty() {
        donors = pool.iter().filter(|p| p.image_id != sample.image_id).collect();
    }
    let donor = donors[rng.random_range(0..donors.len())];
    let mut polluted = sample.clone();
    *polluted.text.part_mut(part) = donor.text.part(part).to_vec();
    Ok(Pollution {
        sample: polluted,
        label: ItmLabel::Polluted,
        part: Some(part),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RppMode {
    /// Is the scene text on the object?
    Binary,
    /// The 12 relative position labels.
    Relation,
}

impl RppMode {
    pub fn classes(self) -> usize {
        match self {
            RppMode::Binary => 2,
            RppMode::Relation => RelativePosition::COUNT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RppLabel {
    On(bool),
    Relation(RelativePosition),
}

impl RppLabel {
    pub fn class_index(self) -> usize {
        match self {
            RppLabel::On(b) => b as usize,
            RppLabel::Relation(r) => r.index(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RppPair {
    pub object: usize,
    pub ocr: usize,
    pub label: RppLabel,
}

pub fn rpp_label(
    obj: &BoundingBox,
    ocr: &BoundingBox,
    mode: RppMode,
    thresholds: &RelationThresholds,
) -> RppLabel {
    let rel = classify_relation_with(obj, ocr, thresholds);
    match mode {
        RppMode::Binary => RppLabel::On(rel == RelativePosition::On),
        RppMode::Relation => RppLabel::Relation(rel),
    }
}

/// Uniform object index and uniform OCR index; `None` when either side is
/// empty (the instance then carries no RPP term).
pub fn sample_rpp_pair<R: Rng + ?Sized>(
    sample: &Sample,
    rng: &mut R,
    mode: RppMode,
    thresholds: &RelationThresholds,
) -> Option<RppPair> {
    if sample.objects.is_empty() || sample.ocr.is_empty() {
        return None;
    }
    let object = rng.random_range(0..sample.objects.len());
    let ocr = rng.random_range(0..sample.ocr.len());
    let label = rpp_label(&sample.objects[object].bbox, &sample.ocr[ocr].bbox, mode, thresholds);
    Some(RppPair { object, ocr, label })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainTasks {
    pub mlm: bool,
    pub itm: bool,
    pub rpp: bool,
    pub mask: MaskConfig,
    pub itm_prob: f64,
    pub rpp_mode: RppMode,
    pub relations: RelationThresholds,
}

impl Default for PretrainTasks {
    fn default() -> Self {
        Self {
            mlm: true,
            itm: true,
            rpp: true,
            mask: MaskConfig::default(),
            itm_prob: 0.5,
            rpp_mode: RppMode::Relation,
            relations: RelationThresholds::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainInstance {
    pub sample: Sample,
    pub mask_positions: Vec<usize>,
    pub mask_targets: Vec<String>,
    pub itm_label: ItmLabel,
    pub polluted_part: Option<Segment>,
    pub rpp: Option<RppPair>,
}

/// Generators for one instance; each sub-task draws from its own stream.
pub struct InstanceRng {
    pub itm: rand_chacha::ChaCha8Rng,
    pub mlm: rand_chacha::ChaCha8Rng,
    pub rpp: rand_chacha::ChaCha8Rng,
}

impl InstanceRng {
    pub fn new(seed: u64, keys: &[u64]) -> Self {
        let stream = |s: u64| {
            let mut r = derive_rng(seed, keys);
            r.set_stream(s);
            r
        };
        Self {
            itm: stream(1),
            mlm: stream(2),
            rpp: stream(3),
        }
    }
}

/// Pollution is decided first; MLM masking only runs on unpolluted text;
/// an RPP pair is drawn whenever both region kinds exist.
pub fn build_pretrain_instance(
    sample: &Sample,
    pool: &[Sample],
    vocab: &Vocabulary,
    rng: &mut InstanceRng,
    tasks: &PretrainTasks,
) -> Result<PretrainInstance> {
    let itm_prob = if tasks.itm { tasks.itm_prob } else { 0.0 };
    let polluted = apply_itm_pollution(sample, pool, &mut rng.itm, itm_prob)?;
    let mut inst = PretrainInstance {
        sample: polluted.sample,
        mask_positions: Vec::new(),
        mask_targets: Vec::new(),
        itm_label: polluted.label,
        polluted_part: polluted.part,
        rpp: None,
    };
    if tasks.mlm && inst.itm_label == ItmLabel::Matched {
        let m = apply_mlm_mask(&inst.sample.text, vocab, &mut rng.mlm, &tasks.mask);
        inst.sample.text = m.text;
        inst.mask_positions = m.positions;
        inst.mask_targets = m.targets;
    }
    if tasks.rpp {
        inst.rpp = sample_rpp_pair(&inst.sample, &mut rng.rpp, tasks.rpp_mode, &tasks.relations);
    }
    Ok(inst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::assemble_extended_text;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2).unwrap()
    }

    pub(crate) fn toy_sample(id: &str, q: &str, labels: &[&str], words: &[&str]) -> Sample {
        let labels: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
        let words_s: Vec<String> = words.iter().map(|s| s.to_string()).collect();
        let text = assemble_extended_text(q, &labels, &words_s, &TextCaps::default());
        let objects = labels
            .iter()
            .enumerate()
            .map(|(i, l)| ObjectRegion {
                bbox: bx(0.1 * i as f64, 0.0, 0.1 * i as f64 + 0.08, 0.5),
                label: l.clone(),
                visual: vec![i as f32; 4],
            })
            .collect();
        let ocr = words
            .iter()
            .enumerate()
            .map(|(i, w)| {
                SceneTextRegion::new(bx(0.1 * i as f64, 0.1, 0.1 * i as f64 + 0.05, 0.15), *w, vec![0.5; 4])
            })
            .collect();
        Sample {
            image_id: id.into(),
            question: q.into(),
            text,
            objects,
            ocr,
            answers: None,
            caption: None,
        }
    }

    fn vocab() -> Vocabulary {
        Vocabulary::build(["stop", "exit", "sign", "car", "what", "is", "on", "the"], 1)
    }

    #[test]
    fn zero_mask_prob_is_identity() {
        let s = toy_sample("a", "what is on the sign", &["sign"], &["stop"]);
        let cfg = MaskConfig {
            prob: 0.0,
            ..MaskConfig::default()
        };
        let m = apply_mlm_mask(&s.text, &vocab(), &mut derive_rng(1, &[]), &cfg);
        assert_eq!(m.text, s.text);
        assert!(m.positions.is_empty());
    }

    #[test]
    fn masking_is_deterministic() {
        let s = toy_sample("a", "what is on the sign now please", &["sign", "car"], &["stop"]);
        assert_eq!(s.text.len(), 10);
        let cfg = MaskConfig {
            prob: 0.5,
            ..MaskConfig::default()
        };
        let a = apply_mlm_mask(&s.text, &vocab(), &mut derive_rng(42, &[]), &cfg);
        let b = apply_mlm_mask(&s.text, &vocab(), &mut derive_rng(42, &[]), &cfg);
        assert_eq!(a, b);
        for (p, t) in a.positions.iter().zip(&a.targets) {
            assert_eq!(s.text.token(*p), Some(t.as_str()));
        }
    }

    #[test]
    fn pollution_needs_other_image() {
        let s = toy_sample("a", "q", &["sign"], &["stop"]);
        let err = apply_itm_pollution(&s, std::slice::from_ref(&s), &mut derive_rng(0, &[]), 0.5).unwrap_err();
        assert!(err.to_string().contains("pollution pool exhausted"));
        let p = apply_itm_pollution(&s, std::slice::from_ref(&s), &mut derive_rng(0, &[]), 0.0).unwrap();
        assert_eq!(p.label, ItmLabel::Matched);
    }

    #[test]
    fn pollution_keeps_regions_and_skips_empty_parts() {
        let s = toy_sample("a", "", &["sign"], &["stop"]);
        let other = toy_sample("b", "what", &["car"], &["exit"]);
        let mut rng = derive_rng(3, &[]);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..200 {
            let p = apply_itm_pollution(&s, std::slice::from_ref(&other), &mut rng, 1.0).unwrap();
            assert_eq!(p.label, ItmLabel::Polluted);
            assert_eq!(p.sample.objects, s.objects);
            assert_eq!(p.sample.ocr, s.ocr);
            let part = p.part.unwrap();
            assert_ne!(part, Segment::Question);
            assert_eq!(p.sample.text.part(part), other.text.part(part));
            seen.insert(part);
        }
        assert_eq!(seen.len(), 2);
    }

    #[test]
    fn rpp_examples() {
        let mut s = toy_sample("a", "q", &["sign"], &["stop"]);
        s.objects[0].bbox = bx(0.1, 0.1, 0.6, 0.6);
        s.ocr[0].bbox = bx(0.2, 0.2, 0.3, 0.3);
        let t = RelationThresholds::default();
        let p = sample_rpp_pair(&s, &mut derive_rng(0, &[]), RppMode::Relation, &t).unwrap();
        assert_eq!((p.object, p.ocr, p.label), (0, 0, RppLabel::Relation(RelativePosition::On)));
        s.ocr[0].bbox = bx(0.9, 0.9, 0.95, 0.95);
        s.objects[0].bbox = bx(0.0, 0.0, 0.05, 0.05);
        let p = sample_rpp_pair(&s, &mut derive_rng(0, &[]), RppMode::Binary, &t).unwrap();
        assert_eq!(p.label, RppLabel::On(false));
        s.ocr.clear();
        assert!(sample_rpp_pair(&s, &mut derive_rng(0, &[]), RppMode::Binary, &t).is_none());
    }

    #[test]
    fn polluted_instances_have_no_masks() {
        let pool: Vec<Sample> = (0..5)
            .map(|i| toy_sample(&format!("img{i}"), "what is on the sign", &["sign", "car"], &["stop", "exit"]))
            .collect();
        let tasks = PretrainTasks {
            mask: MaskConfig {
                prob: 0.9,
                ..MaskConfig::default()
            },
            ..PretrainTasks::default()
        };
        let v = vocab();
        for i in 0..200u64 {
            let mut rng = InstanceRng::new(11, &[i]);
            let inst = build_pretrain_instance(&pool[0], &pool, &v, &mut rng, &tasks).unwrap();
            if inst.itm_label == ItmLabel::Polluted {
                assert!(inst.mask_positions.is_empty());
            } else {
                let mut again = InstanceRng::new(11, &[i]);
                let direct = apply_mlm_mask(&pool[0].text, &v, &mut again.mlm, &tasks.mask);
                assert_eq!(direct.positions, inst.mask_positions);
                assert_eq!(direct.text, inst.sample.text);
            }
            assert!(inst.rpp.is_some());
        }
    }

    #[test]
    fn validation_catches_misaligned_ocr_text() {
        let mut s = toy_sample("a", "q", &["sign"], &["Stop", "EXIT"]);
        s.validate(&TextCaps::default(), 4).unwrap();
        s.text.ocr.swap(0, 1);
        assert!(s.validate(&TextCaps::default(), 4).is_err());
        let s = toy_sample("a", "q", &["sign"], &["stop"]);
        assert!(s.validate(&TextCaps::default(), 5).is_err());
    }
}
