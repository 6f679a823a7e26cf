use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("index {index} out of range 0..{bound}")]
    Index { index: usize, bound: usize },

    #[error("value {value} outside domain {domain}")]
    Domain { value: f64, domain: &'static str },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Load failures, kept distinct so callers can tell a foreign file from a
/// damaged one.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes, not a checkpoint file")]
    BadMagic,

    #[error("format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("shape table mismatch for {name}: file has {found:?}, config expects {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("tensor table mismatch: file has {found} tensors, config expects {expected}")]
    TensorCount { found: usize, expected: usize },

    #[error("malformed config section: {0}")]
    Config(String),
}
