//! Record filtering into a dataset, and scene-text statistics.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::filter::{filter_image, FilterDecision, FilterReason, FilterRules, RawImageRecord};
use super::sidecar::FeatureSidecar;
use crate::error::{Result, TapError};
use crate::sample::{ObjectRegion, Sample, SceneTextRegion, MAX_OBJECTS, MAX_OCR};
use crate::text::{assemble_extended_text, TextCaps};
use crate::work::par_map;

/// Scene-text counts above this share the overflow bin.
pub const HISTOGRAM_MAX: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    /// The count itself, or `">50"` for the overflow bin.
    pub label: String,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub histogram: Vec<HistogramBin>,
}

impl CorpusStats {
    /// Exact statistics of per-image scene-text counts. The median of an
    /// even number of images is the mean of the two middle counts.
    pub fn from_counts(counts: &[usize]) -> Self {
        let n = counts.len();
        let mut sorted = counts.to_vec();
        sorted.sort_unstable();
        let mean = if n == 0 {
            0.0
        } else {
            counts.iter().sum::<usize>() as f64 / n as f64
        };
        let median = match n {
            0 => 0.0,
            _ if n % 2 == 1 => sorted[n / 2] as f64,
            _ => (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0,
        };
        let mut bins = vec![0usize; HISTOGRAM_MAX + 2];
        for &c in counts {
            bins[c.min(HISTOGRAM_MAX + 1)] += 1;
        }
        let histogram = bins
            .into_iter()
            .enumerate()
            .map(|(i, images)| HistogramBin {
                label: if i > HISTOGRAM_MAX {
                    format!(">{HISTOGRAM_MAX}")
                } else {
                    i.to_string()
                },
                images,
            })
            .collect();
        Self {
            count: n,
            mean,
            median,
            histogram,
        }
    }
}

/// Scene-text statistics of a dataset.
pub fn corpus_stats(samples: &[Sample]) -> CorpusStats {
    CorpusStats::from_counts(&samples.iter().map(|s| s.ocr.len()).collect::<Vec<_>>())
}

/// Bar chart of the histogram as a PNG.
pub fn render_histogram(stats: &CorpusStats, path: &Path) -> Result<()> {
    let (bar, gap, height, margin) = (8u32, 2u32, 200u32, 10u32);
    let bins = stats.histogram.len() as u32;
    let width = margin * 2 + bins * (bar + gap);
    let mut img = RgbImage::from_pixel(width, height + margin * 2, Rgb([255, 255, 255]));
    let peak = stats.histogram.iter().map(|b| b.images).max().unwrap_or(0).max(1);
    for (i, b) in stats.histogram.iter().enumerate() {
        let h = (b.images as f64 / peak as f64 * height as f64).round() as u32;
        let x0 = margin + i as u32 * (bar + gap);
        let colour = if i as u32 + 1 == bins { Rgb([200, 80, 60]) } else { Rgb([60, 110, 190]) };
        for x in x0..x0 + bar {
            for y in 0..h {
                img.put_pixel(x, margin + height - 1 - y, colour);
            }
        }
    }
    for x in margin..width - margin {
        img.put_pixel(x, margin + height, Rgb([0, 0, 0]));
    }
    img.save(path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildOptions {
    pub rules: FilterRules,
    pub visual_dim: usize,
    pub caps: TextCaps,
    /// Abort when more than this share of the records is malformed.
    pub max_malformed_fraction: f64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            rules: FilterRules::default(),
            visual_dim: 2048,
            caps: TextCaps::default(),
            max_malformed_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildStats {
    pub records: usize,
    pub malformed: usize,
    pub malformed_ids: Vec<String>,
    pub kept: usize,
    pub reasons: BTreeMap<FilterReason, usize>,
    /// Scene-text counts of the kept images (before the region cap).
    pub scene_text: CorpusStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutput {
    pub samples: Vec<Sample>,
    pub decisions: Vec<(String, FilterDecision)>,
    pub stats: BuildStats,
}

fn feature(
    inline: &Option<Vec<f32>>,
    reference: Option<usize>,
    sidecar: Option<&FeatureSidecar>,
    dim: usize,
    id: &str,
) -> Result<Vec<f32>> {
    let v = match (inline, reference) {
        (Some(v), _) => v.clone(),
        (None, Some(r)) => sidecar
            .and_then(|s| s.row(r))
            .ok_or_else(|| TapError::Schema(format!("record {id}: feature_ref {r} not in the sidecar")))?
            .to_vec(),
        (None, None) => vec![0.0; dim],
    };
    if v.len() != dim {
        return Err(TapError::Schema(format!("record {id}: feature dim {} != {dim}", v.len())));
    }
    Ok(v)
}

/// Converts a kept record: caption to `w^q`, object labels to `w^obj`,
/// OCR words (reading order) to `w^ocr`. Missing features are zeros.
fn to_sample(r: &RawImageRecord, opts: &BuildOptions, sidecar: Option<&FeatureSidecar>) -> Result<Sample> {
    let dim = opts.visual_dim;
    let objects = r
        .objects
        .iter()
        .take(MAX_OBJECTS)
        .map(|o| {
            Ok(ObjectRegion {
                bbox: r.normalize_box(o.bbox)?,
                label: o.label.trim().to_string(),
                visual: feature(&o.feature, o.feature_ref, sidecar, dim, &r.image_id)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ocr = r
        .ocr
        .iter()
        .take(MAX_OCR)
        .map(|o| {
            Ok(SceneTextRegion::new(
                r.normalize_box(o.bbox)?,
                o.word.trim(),
                feature(&o.feature, o.feature_ref, sidecar, dim, &r.image_id)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<String> = objects.iter().map(|o| o.label.clone()).collect();
    let words: Vec<String> = ocr.iter().map(|o| o.word.clone()).collect();
    Ok(Sample {
        image_id: r.image_id.clone(),
        question: r.caption.clone(),
        text: assemble_extended_text(&r.caption, &labels, &words, &opts.caps),
        objects,
        ocr,
        answers: None,
        caption: Some(r.caption.clone()),
    })
}

enum Outcome {
    Malformed(String),
    Filtered(String, FilterDecision, usize, Option<Sample>),
}

/// Filters raw records (one JSON object per line of `input`) into samples.
/// Malformed records are skipped and logged; more than
/// `max_malformed_fraction` of them aborts the build.
pub fn build_corpus(
    input: &str,
    opts: &BuildOptions,
    sidecar: Option<&FeatureSidecar>,
    workers: usize,
) -> Result<BuildOutput> {
    let rules = opts.rules.compile()?;
    let lines: Vec<(usize, &str)> = input.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).collect();
    let outcomes = par_map(&lines, workers, |_, &(lineno, line)| {
        let rec: RawImageRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => return Outcome::Malformed(format!("line {}: {e}", lineno + 1)),
        };
        let built = rec.validate().and_then(|_| {
            let d = filter_image(&rec, &rules)?;
            let s = if d.keep { Some(to_sample(&rec, opts, sidecar)?) } else { None };
            Ok((d, s))
        });
        match built {
            Ok((d, s)) => Outcome::Filtered(rec.image_id.clone(), d, rec.ocr.len(), s),
            Err(e) => Outcome::Malformed(format!("{}: {e}", rec.image_id)),
        }
    });
    let mut out = BuildOutput {
        samples: Vec::new(),
        decisions: Vec::new(),
        stats: BuildStats {
            records: lines.len(),
            malformed: 0,
            malformed_ids: Vec::new(),
            kept: 0,
            reasons: BTreeMap::new(),
            scene_text: CorpusStats::from_counts(&[]),
        },
    };
    let mut counts = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Malformed(id) => {
                log::warn!("skipping malformed record {id}");
                out.stats.malformed += 1;
                out.stats.malformed_ids.push(id);
            }
            Outcome::Filtered(id, d, n, s) => {
                *out.stats.reasons.entry(d.reason).or_default() += 1;
                if let Some(s) = s {
                    counts.push(n);
                    out.samples.push(s);
                }
                out.decisions.push((id, d));
            }
        }
    }
    let limit = opts.max_malformed_fraction * lines.len() as f64;
    if out.stats.malformed as f64 > limit {
        return Err(TapError::Schema(format!(
            "{} of {} records malformed (limit {:.1}%), first: {}",
            out.stats.malformed,
            lines.len(),
            opts.max_malformed_fraction * 100.0,
            out.stats.malformed_ids[0]
        )));
    }
    out.stats.kept = out.samples.len();
    out.stats.scene_text = CorpusStats::from_counts(&counts);
    Ok(out)
}
