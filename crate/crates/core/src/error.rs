use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("empty sequence")]
    EmptySequence,
    #[error("sequence length {len} exceeds max_positions {max}")]
    Overlength { len: usize, max: usize },
    #[error("malformed ancestor mask: {0}")]
    MalformedMask(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
