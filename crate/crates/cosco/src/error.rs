//! Crate-wide error type.

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or layer shapes do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation expected a scalar (or otherwise differently-ranked) value.
    #[error("rank error: {0}")]
    Rank(String),

    /// A caller-supplied value violated an argument contract.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Model or experiment configuration is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// Optimizer state is missing or inconsistent (e.g. a parameter without a gradient).
    #[error("optimizer state error: {0}")]
    State(String),

    /// A non-finite loss or gradient was detected.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Batch statistics cannot be computed (train-mode batch norm over fewer than 2 values).
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    /// A `.ts` file (or other structured input) is malformed; `line` is 1-based.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// A class has too few instances for the requested k-shot split.
    #[error("class {class:?} has {available} instances, but k = {needed}")]
    InsufficientClassSize {
        class: String,
        available: usize,
        needed: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn argument(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub fn parse(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
