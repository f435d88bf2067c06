use std::io;

use thiserror::Error;

pub type Result<T, E = CladError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CladError {
    /// A configuration value is out of range or cannot be satisfied.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation's precondition (shape, arity, ids).
    #[error("contract error: {0}")]
    Contract(String),

    /// Input lies outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed on-disk data. `offset` is the byte position where parsing failed.
    #[error("parse error in {file} at byte {offset}: {message}")]
    Parse {
        file: String,
        offset: u64,
        message: String,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl CladError {
    pub fn contract(msg: impl Into<String>) -> Self {
        CladError::Contract(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        CladError::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        CladError::Config(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        CladError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Short machine-readable tag for the error family.
    pub fn kind(&self) -> &'static str {
        match self {
            CladError::Config(_) => "config",
            CladError::Contract(_) => "contract",
            CladError::Domain(_) => "domain",
            CladError::Numeric(_) => "numeric",
            CladError::Parse { .. } => "parse",
            CladError::Version { .. } => "version",
            CladError::Training { .. } => "training",
            CladError::Io { .. } => "io",
        }
    }
}
