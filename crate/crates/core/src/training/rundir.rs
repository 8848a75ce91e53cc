//! Run directory: configuration snapshot, manifest, metric log and
//! checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::checkpoint::Checkpoint;
use super::Task;
use crate::error::{Result, TapError};
use crate::tensor::Scalar;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: String,
    pub sha256: String,
    pub samples: usize,
}

impl DatasetRef {
    pub fn from_file(path: &Path, samples: usize) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| TapError::io(path, e))?;
        Ok(Self {
            path: path.display().to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            samples,
        })
    }
}

/// Everything needed to rerun a training job with the same code version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub task: Task,
    pub datasets: Vec<DatasetRef>,
    pub config_hash: String,
    pub code_version: String,
    pub init_checkpoint: Option<String>,
    /// Whether decoder parameters were freshly initialized for this run.
    pub decoder_reinitialized: bool,
    pub iterations: usize,
    pub best_iteration: Option<usize>,
    pub best_score: Option<f64>,
    pub metric_log: String,
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn new(seed: u64, task: Task, config_hash: impl Into<String>) -> Self {
        Self {
            seed,
            task,
            datasets: Vec::new(),
            config_hash: config_hash.into(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            init_checkpoint: None,
            decoder_reinitialized: false,
            iterations: 0,
            best_iteration: None,
            best_score: None,
            metric_log: METRICS_FILE.to_string(),
            notes: Vec::new(),
        }
    }
}

pub struct RunDir {
    root: PathBuf,
    log: fs::File,
}

impl RunDir {
    /// Creates (or with `force`, reuses) `root`. An existing non-empty
    /// directory is refused without `force` so nothing is overwritten.
    pub fn create(root: &Path, force: bool) -> Result<Self> {
        if root.exists() {
            let mut entries = fs::read_dir(root).map_err(|e| TapError::io(root, e))?;
            if entries.next().is_some() && !force {
                return Err(TapError::config(
                    "run_dir",
                    format!("{} is not empty; pass --force to overwrite", root.display()),
                ));
            }
        }
        let ckpt = root.join(CHECKPOINT_DIR);
        fs::create_dir_all(&ckpt).map_err(|e| TapError::io(&ckpt, e))?;
        let log_path = root.join(METRICS_FILE);
        let log = fs::File::create(&log_path).map_err(|e| TapError::io(&log_path, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            log,
        })
    }

    /// Reopens an existing run directory, appending to its metric log.
    pub fn reopen(root: &Path) -> Result<Self> {
        let log_path = root.join(METRICS_FILE);
        let log = fs::OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(|e| TapError::io(&log_path, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            log,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.root.join(CHECKPOINT_DIR).join(format!("{name}.ckpt"))
    }

    /// Appends one JSON record to the metric log.
    pub fn log<S: Serialize>(&mut self, record: &S) -> Result<()> {
        let path = self.root.join(METRICS_FILE);
        let line = serde_json::to_string(record)?;
        writeln!(self.log, "{line}").map_err(|e| TapError::io(&path, e))?;
        self.log.flush().map_err(|e| TapError::io(&path, e))
    }

    pub fn save_checkpoint<T: Scalar>(&self, name: &str, ck: &Checkpoint<T>) -> Result<PathBuf> {
        let p = self.checkpoint_path(name);
        ck.save(&p)?;
        Ok(p)
    }

    pub fn write_config(&self, text: &str) -> Result<()> {
        let p = self.root.join(CONFIG_FILE);
        fs::write(&p, text).map_err(|e| TapError::io(&p, e))
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<()> {
        let p = self.root.join(MANIFEST_FILE);
        fs::write(&p, serde_json::to_string_pretty(manifest)?).map_err(|e| TapError::io(&p, e))
    }
}
