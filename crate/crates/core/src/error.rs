use std::path::PathBuf;

use tax_autodiff::AutodiffError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, TaxError>;

#[derive(Debug, Error)]
pub enum TaxError {
    #[error(transparent)]
    Tensor(#[from] AutodiffError),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{path}: malformed {format} data: {msg}")]
    Format { path: PathBuf, format: &'static str, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what}: expected {expected}, got {got}")]
    Shape { what: String, expected: String, got: String },

    #[error("checkpoint {path}: {msg} (at byte offset {offset})")]
    Checkpoint { path: PathBuf, offset: u64, msg: String },

    #[error("checkpoint {path}: format version {found} is not supported (expected {expected})")]
    CheckpointVersion { path: PathBuf, found: u32, expected: u32 },

    #[error("training diverged in stage {stage} at epoch {epoch} (loss {loss})")]
    Diverged { stage: String, epoch: usize, loss: f64 },

    #[error("prototype index is stale (bank hash {index} != current {current}); rebuild it")]
    StaleIndex { index: String, current: String },

    #[error("{0}")]
    Invalid(String),
}

impl TaxError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TaxError::Io { path: path.into(), source }
    }

    pub fn shape(what: impl Into<String>, expected: impl ToString, got: impl ToString) -> Self {
        TaxError::Shape { what: what.into(), expected: expected.to_string(), got: got.to_string() }
    }
}
