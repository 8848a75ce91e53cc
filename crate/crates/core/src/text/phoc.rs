//! Pyramidal histogram of characters.
//!
//! Layout: for each unigram level `L` in `UNIGRAM_LEVELS`, `L` regions of 36
//! bits (`a..z` then `0..9`), followed by the bigram level with 2 regions of
//! one bit per listed bigram. With the default 50 bigrams this is
//! 36 * (2+3+4+5) + 2 * 50 = 604 components.

use std::fs;
use std::path::Path;

use crate::error::{Result, TapError};

pub const UNIGRAM_LEVELS: [usize; 4] = [2, 3, 4, 5];
pub const BIGRAM_LEVEL: usize = 2;
pub const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789";
pub const PHOC_DIM: usize = 604;

const DEFAULT_BIGRAMS: &str = include_str!("../../data/phoc_bigrams.txt");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhocVector(Vec<u8>);

impl PhocVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&b| b as f32).collect()
    }
}

#[derive(Debug, Clone)]
pub struct PhocEncoder {
    bigrams: Vec<[u8; 2]>,
}

impl Default for PhocEncoder {
    fn default() -> Self {
        Self::from_list(DEFAULT_BIGRAMS).expect("bundled bigram list is valid")
    }
}

impl PhocEncoder {
    /// Parses a bigram list, one lowercase alphanumeric bigram per line.
    pub fn from_list(text: &str) -> Result<Self> {
        let mut bigrams = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let b = line.as_bytes();
            if b.len() != 2 || !b.iter().all(|c| ALPHABET.as_bytes().contains(c)) {
                return Err(TapError::Schema(format!("bad PHOC bigram {line:?}")));
            }
            bigrams.push([b[0], b[1]]);
        }
        Ok(Self { bigrams })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| TapError::io(path, e))?;
        Self::from_list(&text)
    }

    pub fn dim(&self) -> usize {
        ALPHABET.len() * UNIGRAM_LEVELS.iter().sum::<usize>() + BIGRAM_LEVEL * self.bigrams.len()
    }

    pub fn encode(&self, word: &str) -> PhocVector {
        let chars: Vec<usize> = word
            .to_lowercase()
            .bytes()
            .filter_map(|c| ALPHABET.bytes().position(|a| a == c))
            .collect();
        let n = chars.len();
        let mut out = vec![0u8; self.dim()];
        if n == 0 {
            return PhocVector(out);
        }
        let mut offset = 0;
        for &level in &UNIGRAM_LEVELS {
            for (k, &c) in chars.iter().enumerate() {
                for region in 0..level {
                    if occupies(k, 1, n, region, level) {
                        out[offset + region * ALPHABET.len() + c] = 1;
                    }
                }
            }
            offset += level * ALPHABET.len();
        }
        for k in 0..n.saturating_sub(1) {
            let pair = [ALPHABET.as_bytes()[chars[k]], ALPHABET.as_bytes()[chars[k + 1]]];
            if let Some(b) = self.bigrams.iter().position(|g| *g == pair) {
                for region in 0..BIGRAM_LEVEL {
                    if occupies(k, 2, n, region, BIGRAM_LEVEL) {
                        out[offset + region * self.bigrams.len() + b] = 1;
                    }
                }
            }
        }
        PhocVector(out)
    }
}

/// Does the span of `width` characters starting at `k` (of `n`) put at least
/// half of its length inside `region` of a `level`-way split? Exact integer
/// arithmetic on a common denominator of `n * level`.
fn occupies(k: usize, width: usize, n: usize, region: usize, level: usize) -> bool {
    let (span_lo, span_hi) = (k * level, (k + width) * level);
    let (reg_lo, reg_hi) = (region * n, (region + 1) * n);
    let overlap = span_hi.min(reg_hi).saturating_sub(span_lo.max(reg_lo));
    2 * overlap >= span_hi - span_lo
}

pub fn phoc_encode(word: &str) -> PhocVector {
    PhocEncoder::default().encode(word)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_word_is_zero() {
        let v = phoc_encode("");
        assert_eq!(v.len(), PHOC_DIM);
        assert!(v.bits().iter().all(|&b| b == 0));
        assert!(phoc_encode("?!-").bits().iter().all(|&b| b == 0));
    }

    #[test]
    fn single_char_only_fills_halves() {
        // one character covers exactly half of each level-2 region and less
        // than half of any finer region
        let v = phoc_encode("a");
        assert_eq!(v.bits()[0], 1);
        assert_eq!(v.bits()[36], 1);
        assert_eq!(v.bits().iter().map(|&b| b as usize).sum::<usize>(), 2);
    }

    #[test]
    fn case_folded_and_filtered() {
        assert_eq!(phoc_encode("Stop!"), phoc_encode("stop"));
    }

    #[test]
    fn bigram_level_fires() {
        // "th" is the first listed bigram; the 2-char word spans both halves
        let v = phoc_encode("th");
        let base = 36 * 14;
        assert_eq!(v.bits()[base], 1);
        assert_eq!(v.bits()[base + 50], 1);
    }

    #[test]
    fn bad_bigram_list_rejected() {
        assert!(PhocEncoder::from_list("abc\n").is_err());
        assert!(PhocEncoder::from_list("a-\n").is_err());
        assert_eq!(PhocEncoder::from_list("th\nhe\n").unwrap().dim(), 504 + 4);
    }
}
