//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Variants map onto the error
//! classes surfaced at the CLI boundary: `Config` exits with code 2, all
//! other variants exit with code 1.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible (mismatched dims, bad inner sizes).
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A caller violated an API precondition.
    #[error("contract error: {0}")]
    Contract(String),

    /// An operation was invoked in a state that cannot serve it
    /// (consumed tape, unfilled queue, NaN abort).
    #[error("state error: {0}")]
    State(String),

    /// A file or payload does not match its expected format.
    #[error("format error: {0}")]
    Format(String),

    /// A feature row collapsed to (near-)zero norm and cannot be normalized.
    #[error("degenerate feature: {0}")]
    DegenerateFeature(String),

    #[error("I/O error on {path}: {source}")]
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

    /// Exit code for the CLI contract: 2 for config/usage, 1 for runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
