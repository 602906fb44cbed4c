use thiserror::Error;

/// Errors produced by model construction, forward passes, and file IO.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Core(#[from] ver_core::CoreError),

    /// Construction-time validation failure (bad dimensions, empty teacher
    /// bank, out-of-range indices, and so on).
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// Binary file did not parse. `offset` is the byte position at which the
    /// problem was detected.
    #[error("{path}: malformed at byte {offset}: {msg}")]
    Format {
        path: String,
        offset: u64,
        msg: String,
    },

    /// A checkpoint's parameter manifest does not match the live store.
    #[error("checkpoint manifest mismatch: missing {missing:?}, unexpected {unexpected:?}, shape mismatch {mismatched:?}")]
    ManifestDiff {
        missing: Vec<String>,
        unexpected: Vec<String>,
        mismatched: Vec<String>,
    },
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ModelError::Config(msg.into()))
}
