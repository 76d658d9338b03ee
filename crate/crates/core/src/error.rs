use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotSpd { pivot: usize, value: f64 },

    #[error("kernel cannot be evaluated at points outside its training set: {0}")]
    UnsupportedExtension(String),

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("degenerate batch: all pre-normalization outputs are zero")]
    DegenerateBatch,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("ill-conditioned request: {0}")]
    IllConditioned(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{path}: incompatible format_version {found} (expected {expected})")]
    Incompatible {
        path: PathBuf,
        found: u64,
        expected: u64,
    },

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// True for failures caused by the numbers rather than the request.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric(_)
                | Error::NotSpd { .. }
                | Error::DegenerateBatch
                | Error::IllConditioned(_)
        )
    }
}
