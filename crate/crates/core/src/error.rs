use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data that violates a type invariant (segment lengths, ranges).
    #[error("specification error: {0}")]
    Spec(String),

    /// A caller broke an operation's precondition (shapes, indices, ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    #[error("base parameters were mutated during control-branch training (hash {before} -> {after})")]
    FrozenBaseMutated { before: String, after: String },

    #[error("bad magic or version in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("truncated payload in {path}: tensor `{tensor}` needs {needed} bytes, {available} available")]
    Truncated {
        path: PathBuf,
        tensor: String,
        needed: usize,
        available: usize,
    },

    #[error("shape mismatch for tensor `{tensor}`: header says {expected:?}, model expects {actual:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("malformed header in {path}: {reason}")]
    BadHeader { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
