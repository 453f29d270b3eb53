use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("masked_softmax: row {row} has no allowed entry")]
    FullyMaskedRow { row: usize },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("cross_entropy: target {target} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { target: usize, vocab: usize },
    #[error("depthwise_conv1d: symmetric mode needs an odd kernel, got {0}")]
    EvenSymmetricKernel(usize),
    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;
