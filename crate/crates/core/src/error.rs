use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {op} got {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("matrix data has {actual} entries, expected {rows}x{cols}")]
    DataLength {
        rows: usize,
        cols: usize,
        actual: usize,
    },

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("reduction over an empty sequence")]
    EmptyReduction,

    #[error("empty negative set: {0}")]
    EmptyNegativeSet(String),

    #[error("segment {0} has no members")]
    PartitionViolation(usize),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes, found {actual}")]
    Length { expected: usize, actual: usize },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("activation cache does not match parameters: {0}")]
    Cache(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("N={n}: {needed} accounted bytes exceed the budget of {budget} bytes")]
    Budget { n: usize, needed: u64, budget: u64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
