//! Dataset files, corpus filtering and statistics, and the synthetic
//! desk-scale corpus.

mod build;
mod filter;
mod sidecar;
mod synth;

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use build::{build_corpus, corpus_stats, render_histogram, BuildOptions, BuildOutput, BuildStats, CorpusStats, HistogramBin};
pub use filter::{filter_image, CompiledRules, FilterDecision, FilterReason, FilterRules, RawImageRecord, RawObject, RawOcr};
pub use sidecar::FeatureSidecar;
pub use synth::{synth_corpus, SynthConfig, SynthTask, OBJECT_LABELS, SCENE_WORDS};

use crate::error::{Result, TapError};
use crate::sample::{Featurizer, Sample};

/// Version stamped on every dataset line.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetLine {
    schema_version: u32,
    #[serde(flatten)]
    sample: Sample,
}

/// Writes one JSON sample per line, in order.
pub fn write_dataset(path: &Path, samples: &[Sample]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| TapError::io(path, e))?;
    let mut w = BufWriter::new(f);
    for s in samples {
        let line = serde_json::to_string(&DatasetLine {
            schema_version: SCHEMA_VERSION,
            sample: s.clone(),
        })?;
        writeln!(w, "{line}").map_err(|e| TapError::io(path, e))?;
    }
    w.flush().map_err(|e| TapError::io(path, e))
}

/// Reads a dataset written by [`write_dataset`]. Word-derived OCR features
/// are not stored; see [`read_featurized`].
pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let f = fs::File::open(path).map_err(|e| TapError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| TapError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetLine =
            serde_json::from_str(&line).map_err(|e| TapError::Schema(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if rec.schema_version != SCHEMA_VERSION {
            return Err(TapError::Schema(format!(
                "{}:{}: schema_version {} (expected {SCHEMA_VERSION})",
                path.display(),
                i + 1,
                rec.schema_version
            )));
        }
        out.push(rec.sample);
    }
    Ok(out)
}

pub fn read_featurized(path: &Path, featurizer: &Featurizer) -> Result<Vec<Sample>> {
    let mut samples = read_dataset(path)?;
    featurizer.featurize_all(&mut samples);
    Ok(samples)
}
