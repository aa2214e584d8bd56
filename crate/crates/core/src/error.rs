use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("initialization error: {0}")]
    Initialization(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("AUC undefined for class `{class}`: labels contain only {present} samples")]
    UndefinedAuc { class: String, present: &'static str },

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("cannot ingest {path}: {message}")]
    Ingestion { path: PathBuf, message: String },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("report error: {0}")]
    Report(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

/// Failures while reading a checkpoint container.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint truncated: missing or incomplete section `{section}`")]
    Truncated { section: String },

    #[error("shape mismatch for `{name}`: checkpoint has {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("checkpoint is missing parameter `{0}`")]
    MissingParameter(String),

    #[error("malformed checkpoint section `{section}`: {message}")]
    Malformed { section: String, message: String },
}
