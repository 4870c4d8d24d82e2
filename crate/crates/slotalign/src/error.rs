//! Error type shared by every module in the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller passed arguments that violate an operation's preconditions
    /// (shape mismatch, out-of-range id, empty input, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A configuration value is out of range or inconsistent with another.
    #[error("invalid config: {0}")]
    Config(String),

    /// An input exceeds a configured capacity (sequence length, audio span).
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// A numeric computation produced a non-finite value.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An object was used in a state that forbids the operation
    /// (e.g. pushing into a finalized stream).
    #[error("invalid state: {0}")]
    State(String),

    /// Training diverged or otherwise failed mid-run.
    #[error("training failed at epoch {epoch}: {msg}")]
    Train { epoch: usize, msg: String },

    /// Text input did not match the expected wire format.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    /// A file had the wrong magic, version, or embedded hash.
    #[error("bad file format in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    /// Underlying I/O failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Attach a path to a raw I/O error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn capacity(msg: impl Into<String>) -> Self {
        Error::Capacity(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }
}
