//! Error types shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ingestion error: {0}")]
    Ingest(String),

    #[error("failed to decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("pair sampling error: {0}")]
    Sampling(String),

    #[error("structural error in layer {layer}: {reason}")]
    Structural { layer: String, reason: String },

    #[error("gallery error: {0}")]
    Gallery(String),

    #[error("evaluation contamination: {0}")]
    Contamination(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training aborted at step {step} (epoch {epoch}): {reason}")]
    Training {
        step: usize,
        epoch: usize,
        reason: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for input/validation problems,
    /// 3 for runtime/training failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Ingest(_)
            | Error::Decode { .. }
            | Error::Split(_)
            | Error::Sampling(_)
            | Error::Gallery(_)
            | Error::Contamination(_)
            | Error::Config(_)
            | Error::Checkpoint(_) => 2,
            Error::Structural { .. } | Error::Training { .. } | Error::Io(_) | Error::Json(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
