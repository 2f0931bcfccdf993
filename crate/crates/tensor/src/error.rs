use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dims {dims:?} require {expected} scalars, got {got}")]
    DataLength {
        dims: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank-{expected} operand, got dims {dims:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        dims: Vec<usize>,
    },
    #[error("conv2d: kernel size {k} unsupported (expected 1 or 3)")]
    KernelSize { k: usize },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward root must hold exactly one scalar, got dims {dims:?}")]
    NonScalarRoot { dims: Vec<usize> },
}
