//! Coreference scores: how strongly attention links positions that refer to
//! the same scene text.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TapError};
use crate::model::{AttentionMaps, DecodeToken, SegmentLayout, TapModel};
use crate::sample::Sample;
use crate::spatial::is_on;
use crate::tensor::Scalar;
use crate::text::ocr_token;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PairKind {
    #[serde(rename = "word->ocr")]
    WordToOcr,
    #[serde(rename = "ocr->word")]
    OcrToWord,
    #[serde(rename = "obj->ocr")]
    ObjToOcr,
    #[serde(rename = "ocr->obj")]
    OcrToObj,
}

impl PairKind {
    pub const ALL: [PairKind; 4] = [PairKind::WordToOcr, PairKind::OcrToWord, PairKind::ObjToOcr, PairKind::OcrToObj];

    pub fn name(self) -> &'static str {
        match self {
            PairKind::WordToOcr => "word->ocr",
            PairKind::OcrToWord => "ocr->word",
            PairKind::ObjToOcr => "obj->ocr",
            PairKind::OcrToObj => "ocr->obj",
        }
    }
}

/// Positions index the fused sequence `[w, obj, ocr, p]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorefPair {
    pub kind: PairKind,
    pub source: usize,
    pub target: usize,
}

fn layout_of(sample: &Sample) -> SegmentLayout {
    SegmentLayout {
        text: sample.text.len(),
        objects: sample.objects.len(),
        ocr: sample.ocr.len(),
        slots: 1,
    }
}

/// Text tokens equal to an OCR word, and OCR regions on an object; each
/// correspondence appears once per direction. A token matching several OCR
/// regions pairs with every one of them.
pub fn find_corresponded_pairs(sample: &Sample) -> Vec<CorefPair> {
    let lay = layout_of(sample);
    let ocr_start = lay.ocr_range().start;
    let obj_start = lay.object_range().start;
    let words: Vec<String> = sample.ocr.iter().map(|r| ocr_token(&r.word)).collect();
    let mut pairs = Vec::new();
    for (i, (tok, _)) in sample.text.iter().enumerate() {
        for (j, w) in words.iter().enumerate() {
            if tok == w {
                pairs.push(CorefPair { kind: PairKind::WordToOcr, source: i, target: ocr_start + j });
                pairs.push(CorefPair { kind: PairKind::OcrToWord, source: ocr_start + j, target: i });
            }
        }
    }
    for (i, o) in sample.objects.iter().enumerate() {
        for (j, r) in sample.ocr.iter().enumerate() {
            if is_on(&o.bbox, &r.bbox) {
                pairs.push(CorefPair { kind: PairKind::ObjToOcr, source: obj_start + i, target: ocr_start + j });
                pairs.push(CorefPair { kind: PairKind::OcrToObj, source: ocr_start + j, target: obj_start + i });
            }
        }
    }
    pairs
}

/// Score of one kind; `score` is `None` when no pair of the kind was seen.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KindScore {
    pub score: Option<f64>,
    pub pairs: usize,
}

/// Running per-kind sums, mergeable across samples.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorefAccumulator {
    sums: BTreeMap<PairKind, (f64, usize)>,
}

impl CorefAccumulator {
    pub fn add(&mut self, maps: &AttentionMaps, pairs: &[CorefPair]) {
        for p in pairs {
            let e = self.sums.entry(p.kind).or_default();
            e.0 += maps.max_attention(p.source, p.target);
            e.1 += 1;
        }
    }

    pub fn merge(&mut self, other: &CorefAccumulator) {
        for (k, (s, n)) in &other.sums {
            let e = self.sums.entry(*k).or_default();
            e.0 += s;
            e.1 += n;
        }
    }

    pub fn scores(&self) -> BTreeMap<PairKind, KindScore> {
        PairKind::ALL
            .iter()
            .map(|&k| {
                let ks = match self.sums.get(&k) {
                    Some(&(s, n)) if n > 0 => KindScore { score: Some(s / n as f64), pairs: n },
                    _ => KindScore::default(),
                };
                (k, ks)
            })
            .collect()
    }
}

/// Per pair, the largest attention over every layer and head; then the mean
/// over the pairs of each kind.
pub fn coreference_score(maps: &AttentionMaps, pairs: &[CorefPair]) -> BTreeMap<PairKind, KindScore> {
    let mut acc = CorefAccumulator::default();
    acc.add(maps, pairs);
    acc.scores()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorefReport {
    pub samples: usize,
    pub kinds: BTreeMap<PairKind, KindScore>,
}

impl CorefReport {
    pub fn score(&self, kind: PairKind) -> Option<f64> {
        self.kinds.get(&kind).and_then(|k| k.score)
    }
}

/// Evaluation-mode attention maps of the multi-modal stack for one sample.
pub fn sample_attention<T: Scalar>(model: &TapModel<T>, sample: &Sample) -> Result<AttentionMaps> {
    let mut g = model.graph();
    let fwd = model.forward(&mut g, sample, &[DecodeToken::Begin], None)?;
    Ok(fwd.attention_maps(&g))
}

/// Pooled coreference scores of `model` over `samples`, pairs averaged
/// across the whole set.
pub fn analyze<T: Scalar>(model: &TapModel<T>, samples: &[Sample], workers: usize) -> Result<CorefReport> {
    let parts = crate::work::par_map(samples, workers, |_, s| -> Result<CorefAccumulator> {
        let mut acc = CorefAccumulator::default();
        acc.add(&sample_attention(model, s)?, &find_corresponded_pairs(s));
        Ok(acc)
    });
    let mut total = CorefAccumulator::default();
    for p in parts {
        total.merge(&p?);
    }
    Ok(CorefReport {
        samples: samples.len(),
        kinds: total.scores(),
    })
}

const CELL: u32 = 8;

/// Grid image of the attention from `source`: one row per layer/head, one
/// column per position, brighter = more attention.
pub fn render_attention_row(maps: &AttentionMaps, source: usize, path: &Path) -> Result<()> {
    let rows: Vec<&[f64]> = maps
        .iter()
        .map(|m| {
            if source >= m.rows {
                return Err(TapError::config("source", format!("position {source} outside {} rows", m.rows)));
            }
            Ok(&m.data[source * m.cols..(source + 1) * m.cols])
        })
        .collect::<Result<_>>()?;
    let cols = maps.layout.total() as u32;
    let mut img = image::GrayImage::new(cols * CELL, rows.len().max(1) as u32 * CELL);
    for (r, row) in rows.iter().enumerate() {
        for (c, &p) in row.iter().enumerate() {
            let v = (p.clamp(0.0, 1.0) * 255.0).round() as u8;
            for dy in 0..CELL {
                for dx in 0..CELL {
                    img.put_pixel(c as u32 * CELL + dx, r as u32 * CELL + dy, image::Luma([v]));
                }
            }
        }
    }
    img.save(path)?;
    Ok(())
}
