use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: input outside the valid domain ({detail})")]
    Domain { op: &'static str, detail: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },

    #[error("variable {index} does not belong to this tape (len {len})")]
    UnknownVar { index: usize, len: usize },
}

pub type Result<T, E = GradError> = std::result::Result<T, E>;
