//! Error type shared by the engine modules.

/// Errors raised by tape operations, the parameter store, and the optimizer.
#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    /// Two operands have incompatible shapes; both are named.
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A single operand has a shape the operation cannot accept.
    #[error("{op}: invalid shape {shape:?} ({msg})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        msg: String,
    },

    /// An index argument is outside the valid range.
    #[error("{op}: index {index} out of range (must be < {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    /// The values themselves are unusable (NaN input, division by zero, ...).
    #[error("{op}: numeric error ({msg})")]
    Numeric { op: &'static str, msg: String },

    /// An API precondition was violated (double backward, non-scalar loss, ...).
    #[error("{0}")]
    Contract(String),

    #[error("unknown parameter {0:?}")]
    UnknownParam(String),

    #[error("duplicate parameter {0:?}")]
    DuplicateParam(String),
}

impl CoreError {
    pub fn contract(msg: impl Into<String>) -> Self {
        CoreError::Contract(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
