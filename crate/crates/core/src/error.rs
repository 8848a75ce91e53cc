use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TapError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TapError {
    #[error("invalid bounding box {0:?}: coordinates must be finite with x1<x2, y1<y2")]
    InvalidBox([f64; 4]),

    #[error("pollution pool exhausted: no sample with an image id other than `{0}`")]
    PollutionPoolExhausted(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("numeric divergence at layer {layer}")]
    NumericDivergence { layer: usize },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl TapError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        TapError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TapError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (files, schemas, configs)
    /// rather than by a failure while running.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            TapError::Config { .. }
                | TapError::Schema(_)
                | TapError::Io { .. }
                | TapError::Json(_)
                | TapError::InvalidBox(_)
        )
    }
}
