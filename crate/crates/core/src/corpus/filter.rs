//! Raw OCR / detection records and the image filter.

use regex::RegexSet;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TapError};
use crate::spatial::BoundingBox;

/// One recognized word of the OCR engine output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawOcr {
    pub word: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    #[serde(default = "one")]
    pub confidence: f64,
    /// Engine-provided watermark flag; the pattern list is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_watermark: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<Vec<f32>>,
    /// Row of the feature sidecar.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_ref: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawObject {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_ref: Option<usize>,
}

fn one() -> f64 {
    1.0
}

/// Input record: an image's caption plus precomputed OCR and detections.
/// Boxes are pixels when `width` and `height` are given, else normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawImageRecord {
    pub image_id: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<f64>,
    #[serde(default)]
    pub ocr: Vec<RawOcr>,
    #[serde(default)]
    pub objects: Vec<RawObject>,
}

impl RawImageRecord {
    pub fn normalize_box(&self, b: [f64; 4]) -> Result<BoundingBox> {
        match (self.width, self.height) {
            (Some(w), Some(h)) => BoundingBox::from_pixels(b[0], b[1], b[2], b[3], w, h),
            (None, None) => BoundingBox::new(b[0], b[1], b[2], b[3]),
            _ => Err(TapError::Schema(format!("record {}: width and height go together", self.image_id))),
        }
    }

    /// Schema checks: non-empty id and words, valid boxes.
    pub fn validate(&self) -> Result<()> {
        if self.image_id.trim().is_empty() {
            return Err(TapError::Schema("record with empty image_id".into()));
        }
        for o in &self.ocr {
            if o.word.trim().is_empty() {
                return Err(TapError::Schema(format!("record {}: empty OCR word", self.image_id)));
            }
            self.normalize_box(o.bbox)?;
        }
        for o in &self.objects {
            if o.label.trim().is_empty() {
                return Err(TapError::Schema(format!("record {}: empty object label", self.image_id)));
            }
            self.normalize_box(o.bbox)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterReason {
    Kept,
    NoText,
    WatermarkOnly,
    TinyOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub keep: bool,
    pub reason: FilterReason,
}

impl FilterDecision {
    fn discard(reason: FilterReason) -> Self {
        Self { keep: false, reason }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterRules {
    /// Regular expressions marking a word as a watermark when the engine
    /// gives no flag.
    pub watermark_patterns: Vec<String>,
    /// Regions shorter than this fraction of the image height are tiny.
    pub tiny_height: f64,
}

impl Default for FilterRules {
    fn default() -> Self {
        Self {
            watermark_patterns: vec![
                r"(?i)^(https?://|www\.)".into(),
                r"(?i)\.(com|net|org|co\.uk)$".into(),
                r"(?i)(shutterstock|alamy|dreamstime|istock|gettyimages|depositphotos|123rf|stockphoto|fotolia|bigstock)".into(),
                r"^[©®]".into(),
            ],
            tiny_height: 0.02,
        }
    }
}

impl FilterRules {
    pub fn compile(&self) -> Result<CompiledRules> {
        if !(self.tiny_height >= 0.0 && self.tiny_height < 1.0) {
            return Err(TapError::config("rules.tiny_height", "must lie in [0, 1)"));
        }
        let patterns = RegexSet::new(&self.watermark_patterns)
            .map_err(|e| TapError::config("rules.watermark_patterns", e.to_string()))?;
        Ok(CompiledRules {
            patterns,
            tiny_height: self.tiny_height,
        })
    }
}

pub struct CompiledRules {
    patterns: RegexSet,
    tiny_height: f64,
}

impl CompiledRules {
    pub fn is_watermark(&self, o: &RawOcr) -> bool {
        o.is_watermark.unwrap_or_else(|| self.patterns.is_match(o.word.trim()))
    }
}

/// Discards images with no scene text, only watermarks, or only tiny
/// non-watermark text (checked in that order).
pub fn filter_image(record: &RawImageRecord, rules: &CompiledRules) -> Result<FilterDecision> {
    if record.ocr.is_empty() {
        return Ok(FilterDecision::discard(FilterReason::NoText));
    }
    let real: Vec<&RawOcr> = record.ocr.iter().filter(|o| !rules.is_watermark(o)).collect();
    if real.is_empty() {
        return Ok(FilterDecision::discard(FilterReason::WatermarkOnly));
    }
    let mut all_tiny = true;
    for o in real {
        if record.normalize_box(o.bbox)?.height() >= rules.tiny_height {
            all_tiny = false;
        }
    }
    if all_tiny {
        return Ok(FilterDecision::discard(FilterReason::TinyOnly));
    }
    Ok(FilterDecision {
        keep: true,
        reason: FilterReason::Kept,
    })
}
