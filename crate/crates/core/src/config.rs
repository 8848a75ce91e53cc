//! Run configuration: every tunable in one TOML document.
//!
//! A config file only lists the keys it changes; everything else keeps the
//! desk-scale defaults. Unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{BuildOptions, SynthConfig};
use crate::error::{Result, TapError};
use crate::evaluation::EvalConfig;
use crate::model::ModelConfig;
use crate::sample::Featurizer;
use crate::text::{open_provider, PhocEncoder};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Sources of the word-derived OCR features.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// `word v1 v2 ...` text file; unknown words fall back to hashed vectors.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub word_vectors: Option<PathBuf>,
    /// PHOC character list, one symbol per line.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phoc_alphabet: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub features: FeatureConfig,
    pub corpus: BuildOptions,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::desk();
        let corpus = BuildOptions {
            visual_dim: model.visual_dim,
            caps: model.caps,
            ..BuildOptions::default()
        };
        let synth = SynthConfig {
            visual_dim: model.visual_dim,
            ..SynthConfig::default()
        };
        Self {
            seed: 0,
            precision: Precision::F32,
            model,
            train: TrainConfig::default(),
            features: FeatureConfig::default(),
            corpus,
            synth,
            eval: EvalConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    /// Parses `text` over the defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| TapError::config("config", e.to_string()))?;
        let mut base = toml::Table::try_from(RunConfig::default()).map_err(|e| TapError::config("config", e.to_string()))?;
        merge(&mut base, user);
        let cfg: RunConfig = base.try_into().map_err(|e: toml::de::Error| TapError::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TapError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            TapError::Config { field, message } => TapError::config(field, format!("{}: {message}", path.display())),
            e => e,
        })
    }

    /// The defaults, or `path` when given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| TapError::config("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(&self.model)?;
        self.corpus.rules.compile()?;
        if self.synth.visual_dim != self.model.visual_dim {
            return Err(TapError::config("synth.visual_dim", "must equal model.visual_dim"));
        }
        if self.corpus.visual_dim != self.model.visual_dim {
            return Err(TapError::config("corpus.visual_dim", "must equal model.visual_dim"));
        }
        if !(0.0..=1.0).contains(&self.eval.anls_threshold) {
            return Err(TapError::config("eval.anls_threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// SHA-256 of the resolved configuration. The worker count is left out
    /// since it does not change results.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.train.workers = 1;
        Ok(hex::encode(Sha256::digest(c.to_toml()?.as_bytes())))
    }

    pub fn featurizer(&self) -> Result<Featurizer> {
        let words = open_provider(self.features.word_vectors.as_deref(), self.model.word_vec_dim)?;
        let phoc = match &self.features.phoc_alphabet {
            Some(p) => PhocEncoder::from_file(p)?,
            None => PhocEncoder::default(),
        };
        if phoc.dim() != self.model.phoc_dim {
            return Err(TapError::config(
                "model.phoc_dim",
                format!("PHOC alphabet gives {} dimensions", phoc.dim()),
            ));
        }
        Ok(Featurizer::new(words, phoc))
    }
}
