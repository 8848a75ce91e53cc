//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `TAPCKPT\0`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then the
//! raw little-endian tensor data in header order (parameters first, then
//! the optimizer's first and second moments when present).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{Adam, AdamConfig};
use crate::error::{Result, TapError};
use crate::model::{ModelConfig, TapModel};
use crate::rng::RngState;
use crate::tensor::{DType, Mat, Scalar};
use crate::text::Vocabulary;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TAPCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trainer position needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub seed: u64,
    pub iteration: usize,
    pub rng: RngState,
    pub best_score: Option<f64>,
    pub best_iteration: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: DType,
    model: ModelConfig,
    vocab: Vocabulary,
    answer_vocab: Vocabulary,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
    trainer: Option<TrainerState>,
    config_hash: String,
    meta: serde_json::Value,
}

pub struct Checkpoint<T: Scalar> {
    pub model: TapModel<T>,
    pub optimizer: Option<Adam<T>>,
    pub trainer: Option<TrainerState>,
    /// Hash of the run configuration that produced the checkpoint.
    pub config_hash: String,
    /// Free-form annotations (task, notes).
    pub meta: serde_json::Value,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_model(model: TapModel<T>) -> Self {
        Self {
            model,
            optimizer: None,
            trainer: None,
            config_hash: String::new(),
            meta: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = &self.model.params;
        let tensors = params
            .iter()
            .map(|(name, m)| TensorEntry {
                name: name.to_string(),
                rows: m.rows,
                cols: m.cols,
            })
            .collect();
        let header = Header {
            version: CHECKPOINT_VERSION,
            dtype: T::DTYPE,
            model: self.model.config.clone(),
            vocab: self.model.vocab.clone(),
            answer_vocab: self.model.answer_vocab.clone(),
            tensors,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                config: o.config,
                step: o.step,
            }),
            trainer: self.trainer.clone(),
            config_hash: self.config_hash.clone(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 20 + params.num_scalars() * T::DTYPE.size() * 3);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut write = |m: &Mat<T>| m.data.iter().for_each(|v| v.write_le(&mut out));
        params.iter().for_each(|(_, m)| write(m));
        if let Some(o) = &self.optimizer {
            o.m.iter().chain(&o.v).for_each(&mut write);
        }
        Ok(out)
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| TapError::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| TapError::io(&tmp, e))?;
        f.sync_all().map_err(|e| TapError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| TapError::io(path, e))
    }

    /// Parses a checkpoint. With `expected`, any difference from the stored
    /// model configuration is refused.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self> {
        let bad = |m: &str| TapError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(TapError::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
        if body.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        if let Some(exp) = expected {
            if *exp != header.model {
                return Err(TapError::Checkpoint(format!(
                    "model configuration mismatch: checkpoint has {}, run expects {}",
                    serde_json::to_string(&header.model)?,
                    serde_json::to_string(exp)?
                )));
            }
        }
        let mut data = &body[hlen..];
        let size = header.dtype.size();
        let mut read = |rows: usize, cols: usize| -> Result<Mat<T>> {
            let n = rows * cols * size;
            if data.len() < n {
                return Err(bad("truncated tensor data"));
            }
            let values = data[..n]
                .chunks_exact(size)
                .map(|c| match header.dtype {
                    DType::F32 => T::widen_f32(f32::read_le(c)),
                    DType::F64 => T::from_f64_lossy(f64::read_le(c)),
                })
                .collect();
            data = &data[n..];
            Ok(Mat::from_vec(rows, cols, values))
        };
        let mut model = TapModel::<T>::new(header.model.clone(), header.vocab.clone(), header.answer_vocab.clone(), 0)?;
        if model.params.len() != header.tensors.len() {
            return Err(bad("tensor list does not match the model layout"));
        }
        let mut ids = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let id = model
                .params
                .id(&t.name)
                .ok_or_else(|| TapError::Checkpoint(format!("unknown tensor `{}`", t.name)))?;
            if model.params.get(id).shape() != (t.rows, t.cols) {
                return Err(TapError::Checkpoint(format!("tensor `{}` has the wrong shape", t.name)));
            }
            *model.params.get_mut(id) = read(t.rows, t.cols)?;
            ids.push(id);
        }
        let optimizer = match header.optimizer {
            Some(o) => {
                let mut adam = Adam::new(o.config, &model.params);
                adam.step = o.step;
                for (t, id) in header.tensors.iter().zip(&ids) {
                    adam.m[id.0] = read(t.rows, t.cols)?;
                }
                for (t, id) in header.tensors.iter().zip(&ids) {
                    adam.v[id.0] = read(t.rows, t.cols)?;
                }
                Some(adam)
            }
            None => None,
        };
        if !data.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self {
            model,
            optimizer,
            trainer: header.trainer,
            config_hash: header.config_hash,
            meta: header.meta,
        })
    }

    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| TapError::io(path, e))?;
        Self::from_bytes(&bytes, expected)
    }
}
