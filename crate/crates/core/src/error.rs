use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("capacity exceeded: position {requested} is beyond max_positions {max}")]
    Capacity { requested: usize, max: usize },

    #[error("data error: {0}")]
    Data(String),

    #[error("optimization failed at step {step}: {detail}")]
    Optimization { step: usize, detail: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt checkpoint {}: {detail}", path.display())]
    Corrupt { path: PathBuf, detail: String },

    #[error("unsupported checkpoint version {found} in {} (expected {expected})", path.display())]
    Version { path: PathBuf, found: u32, expected: u32 },
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension { op, detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
