use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid dropout rate {0}; must lie in [0, 1)")]
    InvalidRate(f64),

    #[error("invalid target {target} at row {row} for {classes} classes")]
    InvalidTarget {
        row: usize,
        target: usize,
        classes: usize,
    },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
