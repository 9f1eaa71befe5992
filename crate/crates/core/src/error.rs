use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violated an operation's precondition (non-finite input,
    /// negative weights, out-of-range rotation, ...).
    #[error("rejected input: {0}")]
    InvalidInput(String),

    /// Shapes, channel counts or settings that do not fit together.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("point lies behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },

    /// A file exists but does not carry the expected layout.
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unregistered primitive `{0}`")]
    UnknownPrimitive(String),

    #[error("tape has already been differentiated; nested differentiation is not supported")]
    NestedDifferentiation,

    #[error("training diverged at step {step}: total loss {value}")]
    Divergence { step: usize, value: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn config(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
