use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input cloud")]
    EmptyCloud,
    #[error("empty reference set")]
    EmptyReferences,
    #[error("empty memory bank")]
    EmptyMemoryBank,
    #[error("empty search region")]
    EmptySearchRegion,
    #[error("numerical overflow in scan at token {token}")]
    NumericalOverflow { token: usize },
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: String,
        got: String,
    },
    #[error("order is not a permutation of 0..{len}")]
    NotPermutation { len: usize },
    #[error("non-monotonic timestamp: {got} after {last}")]
    NonMonotonicTimestamp { last: u64, got: u64 },
    #[error("tracklet too short: {len} frames (need at least 2)")]
    TrackletTooShort { len: usize },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("checksum mismatch: stored {stored}, computed {computed}")]
    Checksum { stored: String, computed: String },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {got:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(what: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            what,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
