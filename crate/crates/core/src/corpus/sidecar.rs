//! Binary feature sidecar.
//!
//! Layout: the 8-byte magic `TAPFEAT\0`, a little-endian `u32` version, a
//! `u32` feature dimension and a `u64` row count, then `rows x dim`
//! little-endian `f32` values, row-major. A feature reference is a row
//! index.

use std::fs;
use std::path::Path;

use crate::error::{Result, TapError};

const MAGIC: &[u8; 8] = b"TAPFEAT\0";
const VERSION: u32 = 1;
const HEADER: usize = 24;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSidecar {
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureSidecar {
    pub fn rows(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn row(&self, i: usize) -> Option<&[f32]> {
        (i < self.rows()).then(|| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.rows() as u64).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| TapError::Schema(format!("feature sidecar: {m}"));
        if bytes.len() < HEADER || &bytes[..8] != MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        if u32_at(8) != VERSION {
            return Err(bad("unsupported version"));
        }
        let dim = u32_at(12) as usize;
        let rows = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
        let body = &bytes[HEADER..];
        if body.len() != rows * dim * 4 {
            return Err(bad("size does not match the header"));
        }
        let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok(Self { dim, data })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| TapError::io(path, e))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| TapError::io(path, e))
    }
}
