use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index {index} out of range for collection of {count} particles")]
    IndexOutOfRange { index: usize, count: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite value in {what} (particle {index})")]
    NonFinite { what: &'static str, index: usize },

    #[error("IDX format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    #[error("degenerate point cloud: {0}")]
    DegenerateCloud(String),

    #[error("malformed complex: {0}")]
    MalformedComplex(String),

    #[error("simplex budget of {budget} exceeded while building the complex")]
    SimplexBudget { budget: usize },

    #[error("oracle size cap exceeded: {count} simplices > {cap}")]
    OracleCap { count: usize, cap: usize },

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("parse error in {path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
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
