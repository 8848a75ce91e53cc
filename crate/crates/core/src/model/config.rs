use serde::{Deserialize, Serialize};

use crate::error::{Result, TapError};
use crate::sample::RppMode;
use crate::text::{TextCaps, DEFAULT_WORD_VEC_DIM, PHOC_DIM};

/// Layer layout: (text-only layers, multi-modal layers).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// 3 text layers followed by a 4-layer multi-modal transformer.
    #[serde(rename = "3,4")]
    Text3Fusion4,
    /// No separate text stack; a 12-layer multi-modal transformer.
    #[serde(rename = "0,12")]
    Fusion12,
}

impl Variant {
    pub fn layers(self) -> (usize, usize) {
        match self {
            Variant::Text3Fusion4 => (3, 4),
            Variant::Fusion12 => (0, 12),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Vqa,
    Caption,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub hidden: usize,
    pub heads: usize,
    pub intermediate: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub init_std: f64,
    pub visual_dim: usize,
    pub word_vec_dim: usize,
    pub phoc_dim: usize,
    pub caps: TextCaps,
    pub max_decode_steps_vqa: usize,
    pub max_decode_steps_caption: usize,
    pub rpp_mode: RppMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Text3Fusion4,
            hidden: 768,
            heads: 12,
            intermediate: 3072,
            dropout: 0.1,
            layer_norm_eps: 1e-12,
            init_std: 0.02,
            visual_dim: 2048,
            word_vec_dim: DEFAULT_WORD_VEC_DIM,
            phoc_dim: PHOC_DIM,
            caps: TextCaps::default(),
            max_decode_steps_vqa: 12,
            max_decode_steps_caption: 30,
            rpp_mode: RppMode::Relation,
        }
    }
}

impl ModelConfig {
    /// Small widths that train in minutes on one CPU core. Layer counts,
    /// head count, caps and decode lengths stay at their full values.
    pub fn desk() -> Self {
        Self {
            hidden: 96,
            intermediate: 192,
            dropout: 0.0,
            visual_dim: 64,
            ..Self::default()
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn text_layers(&self) -> usize {
        self.variant.layers().0
    }

    pub fn mm_layers(&self) -> usize {
        self.variant.layers().1
    }

    pub fn rpp_classes(&self) -> usize {
        self.rpp_mode.classes()
    }

    pub fn max_decode_steps(&self, mode: DecodeMode) -> usize {
        match mode {
            DecodeMode::Vqa => self.max_decode_steps_vqa,
            DecodeMode::Caption => self.max_decode_steps_caption,
        }
    }

    /// Width of the concatenated OCR appearance feature.
    pub fn ocr_feature_dim(&self) -> usize {
        self.visual_dim + self.word_vec_dim + self.phoc_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(TapError::config(
                "model.hidden",
                format!("hidden size {} must be a positive multiple of heads {}", self.hidden, self.heads),
            ));
        }
        if self.intermediate == 0 {
            return Err(TapError::config("model.intermediate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TapError::config("model.dropout", "must be in [0, 1)"));
        }
        if self.max_decode_steps_vqa == 0 || self.max_decode_steps_caption == 0 {
            return Err(TapError::config("model.max_decode_steps", "must be positive"));
        }
        if self.caps.total() == 0 {
            return Err(TapError::config("model.caps", "text caps must allow at least one token"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_settings() {
        let c = ModelConfig::default();
        assert_eq!(c.variant.layers(), (3, 4));
        assert_eq!((c.hidden, c.heads), (768, 12));
        assert_eq!(c.caps.total(), 220);
        assert_eq!(c.max_decode_steps(DecodeMode::Vqa), 12);
        assert_eq!(c.max_decode_steps(DecodeMode::Caption), 30);
        assert_eq!(c.rpp_classes(), 12);
        c.validate().unwrap();
        ModelConfig::desk().validate().unwrap();
    }

    #[test]
    fn rejects_indivisible_heads() {
        let c = ModelConfig {
            hidden: 100,
            ..ModelConfig::default()
        };
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("model.hidden"));
    }

    #[test]
    fn variant_serializes_as_layer_pair() {
        let c = ModelConfig::default().with_variant(Variant::Fusion12);
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"0,12\""));
        let back: ModelConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back.mm_layers(), 12);
        assert!(serde_json::from_str::<ModelConfig>("{\"bogus\":1}").is_err());
    }
}
