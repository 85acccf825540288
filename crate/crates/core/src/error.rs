//! Crate-wide error type.
//!
//! Variants mirror the failure classes of the public operations: shape and
//! index violations from the tensor engine, configuration and contract
//! violations from model/training code, checkpoint format problems (always
//! with a byte offset), and composition refusals.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two shapes that were required to agree did not. Both are named.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An index (token id, gather row, target class) fell outside its table.
    #[error("index out of range in {op}: {index} not below {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    /// A statically checkable configuration value is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// A runtime precondition of an operation was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A child could not be initialized from the given parent/regime.
    #[error("transfer error: {0}")]
    Transfer(String),

    /// Checkpoint composition refused (lineage, side, or regime mismatch).
    #[error("composition error: {0}")]
    Composition(String),

    /// A serialized artifact is malformed. `offset` is the byte position at
    /// which reading failed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Nearest-neighbor retrieval was asked something ill-posed.
    #[error("retrieval error: {0}")]
    Retrieval(String),

    /// A score or accuracy is undefined on the given input (e.g. empty
    /// corpus, no overlapping types).
    #[error("undefined value: {0}")]
    Undefined(String),

    /// The task generator could not satisfy its postconditions.
    #[error("generation error: {0}")]
    Generation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Wrap an I/O failure with the path it concerned.
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
