use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TapError};

pub const PAD: usize = 0;
pub const MASK: usize = 1;
pub const BEGIN: usize = 2;
pub const END: usize = 3;
pub const UNK: usize = 4;

pub const RESERVED: [&str; 5] = ["[PAD]", "[MASK]", "[BEGIN]", "[END]", "[UNK]"];

/// Frozen token <-> id map. Ids are dense from 0 and the reserved block
/// always occupies ids `0..RESERVED.len()`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from a token stream, keeping tokens seen at least
    /// `min_count` times. Ordering is by descending count, then lexicographic.
    pub fn build<I, S>(tokens: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in tokens {
            let t = t.as_ref();
            if RESERVED.contains(&t) || t.is_empty() {
                continue;
            }
            *counts.entry(t.to_string()).or_default() += 1;
        }
        let mut entries: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count.max(1))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_regular(entries.into_iter().map(|(t, _)| t))
    }

    /// Vocabulary holding only the reserved tokens.
    pub fn reserved_only() -> Self {
        Self::from_regular(std::iter::empty::<String>())
    }

    fn from_regular<I: IntoIterator<Item = String>>(regular: I) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        for t in regular {
            if !index.contains_key(&t) {
                index.insert(t.clone(), tokens.len());
                tokens.push(t);
            }
        }
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of non-reserved tokens.
    pub fn regular_len(&self) -> usize {
        self.tokens.len() - RESERVED.len()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Writes one regular token per line; line `i` holds id `RESERVED.len() + i`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            body.push_str(t);
            body.push('\n');
        }
        fs::write(path, body).map_err(|e| TapError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| TapError::io(path, e))?;
        Self::try_from(
            RESERVED
                .iter()
                .map(|s| s.to_string())
                .chain(body.lines().map(str::to_string))
                .collect::<Vec<_>>(),
        )
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = TapError;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(TapError::Schema("vocabulary must start with the reserved block".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || index.insert(t.clone(), i).is_some() {
                return Err(TapError::Schema(format!("bad vocabulary entry {t:?} at id {i}")));
            }
        }
        Ok(Self { tokens, index })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}
