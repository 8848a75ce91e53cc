//! Word-vector providers. Pretrained vectors can be loaded from a text
//! file (`word v1 v2 ...` per line); anything missing falls back to a
//! deterministic hash-seeded unit vector.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Result, TapError};

pub const DEFAULT_WORD_VEC_DIM: usize = 300;

pub trait WordVectorProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn vector(&self, word: &str) -> Vec<f32>;
}

#[derive(Debug, Clone)]
pub struct HashWordVectors {
    dim: usize,
}

impl HashWordVectors {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl WordVectorProvider for HashWordVectors {
    fn dim(&self) -> usize {
        self.dim
    }

    fn vector(&self, word: &str) -> Vec<f32> {
        let digest = Sha256::digest(word.as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let raw: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        raw.into_iter().map(|v| (v / norm) as f32).collect()
    }
}

/// Table of pretrained vectors; unknown words use the hash fallback.
pub struct TableWordVectors {
    table: HashMap<String, Vec<f32>>,
    fallback: HashWordVectors,
}

impl TableWordVectors {
    pub fn load(path: &Path, dim: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TapError::io(path, e))?;
        let mut table = HashMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let values: Vec<f32> = parts
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| TapError::Schema(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
            // word2vec text files start with a "count dim" header
            if lineno == 0 && values.len() == 1 {
                continue;
            }
            if values.len() != dim {
                return Err(TapError::config(
                    "word_vec_dim",
                    format!("{} has {}-d vectors, expected {dim}", path.display(), values.len()),
                ));
            }
            table.insert(word.to_string(), values);
        }
        Ok(Self {
            table,
            fallback: HashWordVectors::new(dim),
        })
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

impl WordVectorProvider for TableWordVectors {
    fn dim(&self) -> usize {
        self.fallback.dim
    }

    fn vector(&self, word: &str) -> Vec<f32> {
        match self.table.get(word) {
            Some(v) => v.clone(),
            None => self.fallback.vector(word),
        }
    }
}

/// Opens the configured provider. A configured but missing file is not an
/// error: the hash provider is used and a notice is logged.
pub fn open_provider(path: Option<&Path>, dim: usize) -> Result<Box<dyn WordVectorProvider>> {
    match path {
        Some(p) if p.exists() => Ok(Box::new(TableWordVectors::load(p, dim)?)),
        Some(p) => {
            log::warn!(
                "word vector file {} not found; using hash-based vectors",
                p.display()
            );
            Ok(Box::new(HashWordVectors::new(dim)))
        }
        None => Ok(Box::new(HashWordVectors::new(dim))),
    }
}
