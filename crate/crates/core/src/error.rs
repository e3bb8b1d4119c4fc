use std::io;

use thiserror::Error;

/// Errors produced anywhere in the adaptation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("no samples in {0}")]
    NoSamples(String),

    #[error("utterance too short: {samples} samples, need at least {window}")]
    TooShort { samples: usize, window: usize },

    #[error("wrong feature stage: expected {expected}, found {found}")]
    Stage {
        expected: &'static str,
        found: &'static str,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no legal path: {0}")]
    NoPath(String),

    #[error("initialization failed: {0}")]
    Init(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing targets: {0}")]
    Target(String),

    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error("missing prerequisite: {0}")]
    Missing(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
