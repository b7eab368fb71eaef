use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg} (shape {shape:?})")]
    Invalid {
        op: &'static str,
        msg: String,
        shape: Vec<usize>,
    },
    #[error("backward: loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tensor with shape {shape:?} needs {expected} values, got {got}")]
    Length {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>, shape: &[usize]) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
        shape: shape.to_vec(),
    }
}
