use std::path::PathBuf;

use itemvoice_tensor::TensorError;
use thiserror::Error;

use crate::corpus::Split;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),

    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("speaker `{speaker}` appears in both the {first} and {second} splits")]
    SplitLeak {
        speaker: String,
        first: Split,
        second: Split,
    },

    #[error("recording `{recording}` has no score for item {item}")]
    MissingScore { recording: String, item: usize },

    #[error("recording `{recording}` item {item} score {score} outside {min}..={max}")]
    ScoreOutOfRange {
        recording: String,
        item: usize,
        score: i64,
        min: u8,
        max: u8,
    },

    #[error("recording `{recording}` states total {stated} but items sum to {computed}")]
    TotalMismatch {
        recording: String,
        stated: u32,
        computed: u32,
    },

    #[error("invalid manifest: {0}")]
    InvalidManifest(String),

    #[error("manifest has no recordings")]
    EmptyManifest,

    #[error("invalid CSV: {0}")]
    InvalidCsv(String),

    #[error("expected {expected} feature columns, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value at data row {row}, column `{column}`")]
    NonFiniteValue { row: usize, column: String },

    #[error("input too short: need {needed_s} s, have {actual_s} s")]
    TooShort { needed_s: f64, actual_s: f64 },

    #[error("mel filter {index} has no non-zero weight; FFT size too small for this many filters")]
    DegenerateFilter { index: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("sequence must hold {expected} steps, got {actual}")]
    BadSequenceLength { expected: usize, actual: usize },

    #[error("the {0} split is empty")]
    EmptySplit(Split),

    #[error("probability grid has no segments")]
    EmptyGrid,

    #[error("expected one decision per item ({expected}), got {actual}")]
    IncompleteDecisions { expected: usize, actual: usize },

    #[error("{predictions} predictions but {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },

    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure stems from invalid inputs rather than a runtime fault.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. }
                | Error::Tensor(TensorError::NonFiniteGradient(_))
                | Error::Tensor(TensorError::Io(_))
        )
    }
}
