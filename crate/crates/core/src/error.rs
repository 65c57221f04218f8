use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("feature vector is empty")]
    EmptyVector,
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("key set is empty")]
    EmptyKeySet,
    #[error("head {head} out of range for {heads} heads")]
    InvalidHead { head: usize, heads: usize },
    #[error("batch of {batch} features exceeds capacity {capacity}")]
    BatchTooLarge { batch: usize, capacity: usize },
    #[error("batch mixes frame indices {first} and {other}")]
    MixedFrameIndices { first: u64, other: u64 },
    #[error("frame index {incoming} precedes stored frame {latest}")]
    NonMonotoneFrame { incoming: u64, latest: u64 },
    #[error("{found:?} feature offered to a bank that accepts {expected:?}")]
    LevelMismatch {
        expected: crate::types::Level,
        found: crate::types::Level,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("malformed parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
