use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("incompatible layers {from} -> {to}: {reason}")]
    IncompatibleLayers {
        from: String,
        to: String,
        reason: String,
    },

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("length mismatch for {what}: expected {expected}, got {actual}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite {what} at index {index}: {value}")]
    NonFinite {
        what: &'static str,
        index: usize,
        value: f32,
    },

    #[error("invalid label {label} at example {index} (num_classes = {num_classes})")]
    InvalidLabel {
        index: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("pruning error: {0}")]
    Pruning(String),

    #[error("compression ratio undefined: mask has no surviving weights")]
    NoSurvivors,

    #[error("retraining time {t} exceeds original training time {total}")]
    RetrainTooLong { t: f64, total: f64 },

    #[error("snapshot for epoch {epoch} already recorded")]
    DuplicateSnapshot { epoch: f64 },

    #[error("no snapshot for epoch {epoch}; available epochs: {available:?}")]
    MissingSnapshot { epoch: f64, available: Vec<f64> },

    #[error("checksum mismatch in {path}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum {
        path: PathBuf,
        stored: u32,
        computed: u32,
    },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("division by zero: {0}")]
    ZeroDenominator(&'static str),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(offset: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            message: message.into(),
        }
    }
}
