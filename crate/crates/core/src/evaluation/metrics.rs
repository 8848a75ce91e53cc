use std::collections::{HashMap, HashSet};

use crate::error::{Result, TapError};
use crate::text::tokenize;

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Lowercases, turns punctuation into spaces (apostrophes are dropped),
/// removes the articles "a", "an", "the" and collapses whitespace.
pub fn normalize_answer(s: &str) -> String {
    let cleaned: String = s
        .to_lowercase()
        .chars()
        .filter(|&c| c != '\'')
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !ARTICLES.contains(w))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Soft-voting accuracy: the mean over leave-one-out subsets of the human
/// answers of `min(matches / 3, 1)`.
pub fn vqa_accuracy(pred: &str, answers: &[String]) -> Result<f64> {
    if answers.len() < 10 {
        return Err(TapError::Metric(format!("vqa accuracy needs 10 answers, got {}", answers.len())));
    }
    let pred = normalize_answer(pred);
    let hits: Vec<bool> = answers.iter().map(|a| normalize_answer(a) == pred).collect();
    let total = hits.iter().filter(|&&h| h).count();
    let sum: f64 = hits
        .iter()
        .map(|&h| {
            let others = total - usize::from(h);
            (others as f64 / 3.0).min(1.0)
        })
        .sum();
    Ok(sum / answers.len() as f64)
}

fn anls_normalize(s: &str) -> String {
    s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Average normalized Levenshtein similarity for one prediction: the best
/// `1 - NL` over the ground truths, or 0 when even the best normalized
/// distance reaches `threshold`.
pub fn anls(pred: &str, gts: &[String], threshold: f64) -> Result<f64> {
    if gts.is_empty() {
        return Err(TapError::Metric("anls needs at least one ground-truth answer".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(TapError::Metric(format!("anls threshold {threshold} outside (0, 1)")));
    }
    let p = anls_normalize(pred);
    let best_nl = gts
        .iter()
        .map(|g| {
            let g = anls_normalize(g);
            let len = p.chars().count().max(g.chars().count());
            if len == 0 {
                0.0
            } else {
                strsim::levenshtein(&p, &g) as f64 / len as f64
            }
        })
        .fold(f64::INFINITY, f64::min);
    Ok(if best_nl < threshold { 1.0 - best_nl } else { 0.0 })
}

pub const CIDER_N: usize = 4;
pub const CIDER_SIGMA: f64 = 6.0;

type NgramCounts = HashMap<Vec<String>, f64>;

fn ngram_counts(sentence: &str) -> NgramCounts {
    let toks = tokenize(sentence);
    let mut out = HashMap::new();
    for n in 1..=CIDER_N {
        for w in toks.windows(n) {
            *out.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    out
}

struct TfIdf {
    vec: [HashMap<Vec<String>, f64>; CIDER_N],
    norm: [f64; CIDER_N],
    /// Bigram count, which the reference implementation uses as length.
    length: f64,
}

fn tf_idf(counts: &NgramCounts, df: &HashMap<Vec<String>, f64>, ref_len: f64) -> TfIdf {
    let mut vec: [HashMap<Vec<String>, f64>; CIDER_N] = Default::default();
    let mut norm = [0.0; CIDER_N];
    let mut length = 0.0;
    for (g, &tf) in counts {
        let n = g.len() - 1;
        let w = tf * (ref_len - df.get(g).copied().unwrap_or(0.0).max(1.0).ln());
        vec[n].insert(g.clone(), w);
        norm[n] += w * w;
        if n == 1 {
            length += tf;
        }
    }
    TfIdf {
        vec,
        norm: norm.map(f64::sqrt),
        length,
    }
}

fn cider_sim(hyp: &TfIdf, r: &TfIdf) -> f64 {
    let delta = hyp.length - r.length;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut total = 0.0;
    for n in 0..CIDER_N {
        let mut val: f64 = hyp.vec[n]
            .iter()
            .map(|(g, &h)| {
                let rv = r.vec[n].get(g).copied().unwrap_or(0.0);
                h.min(rv) * rv
            })
            .sum();
        if hyp.norm[n] != 0.0 && r.norm[n] != 0.0 {
            val /= hyp.norm[n] * r.norm[n];
        }
        total += val * penalty;
    }
    total
}

/// CIDEr-D per candidate: tf-idf n-gram cosine (n = 1..4) with clipping and
/// a Gaussian length penalty, averaged over n and references, times 10.
/// Document frequencies come from the references of all candidates.
pub fn cider(candidates: &[String], references: &[Vec<String>]) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(TapError::Metric("cider on an empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(TapError::Metric("cider: one reference list per candidate required".into()));
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(TapError::Metric(format!("cider: candidate {i} has no reference")));
    }
    let ref_counts: Vec<Vec<NgramCounts>> =
        references.iter().map(|rs| rs.iter().map(|r| ngram_counts(r)).collect()).collect();
    let mut df: HashMap<Vec<String>, f64> = HashMap::new();
    for rs in &ref_counts {
        let grams: HashSet<&Vec<String>> = rs.iter().flat_map(|c| c.keys()).collect();
        for g in grams {
            *df.entry(g.clone()).or_insert(0.0) += 1.0;
        }
    }
    let ref_len = (candidates.len() as f64).ln();
    Ok(candidates
        .iter()
        .zip(&ref_counts)
        .map(|(c, rs)| {
            let hyp = tf_idf(&ngram_counts(c), &df, ref_len);
            let sum: f64 = rs.iter().map(|r| cider_sim(&hyp, &tf_idf(r, &df, ref_len))).sum();
            sum / CIDER_N as f64 / rs.len() as f64 * 10.0
        })
        .collect())
}
