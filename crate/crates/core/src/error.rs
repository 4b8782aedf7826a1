use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid argument to {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("pow with negative base {0}")]
    NegativeBase(f32),
    #[error("division by zero")]
    DivisionByZero,
    #[error("matrix is singular (|det| = {0:e})")]
    SingularMatrix(f32),
    #[error("variable is not on this tape")]
    NotOnTape,
    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),
    #[error("invalid ccm pool: {0}")]
    CcmPool(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        reason: reason.into(),
    }
}

pub(crate) fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
