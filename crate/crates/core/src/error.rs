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

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate mask: expected mask value is zero ({0})")]
    DegenerateMask(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("IDX format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("IDX length error: expected {expected} bytes, found {actual}")]
    Length { expected: usize, actual: usize },

    #[error("data consistency error: {0}")]
    Consistency(String),

    #[error("numerical abort: {0}")]
    Numerical(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
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

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the CLI: 2 config, 3 data, 4 numerical, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::DegenerateMask(_) => 2,
            Error::Format { .. }
            | Error::Length { .. }
            | Error::Consistency(_)
            | Error::Io { .. }
            | Error::Checkpoint(_) => 3,
            Error::Numerical(_) => 4,
            Error::Dimension { .. } | Error::Domain(_) => 1,
        }
    }
}
