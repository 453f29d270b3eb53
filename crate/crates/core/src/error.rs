use thiserror::Error;

use ketlab_autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum KetError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("empty text: nothing to tokenize")]
    EmptyText,
    #[error("token stream too short: need at least {needed} tokens, got {got}")]
    StreamTooShort { needed: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown variant `{name}`; valid variants: {valid}")]
    UnknownVariant { name: String, valid: String },
    #[error("`{op}` is not defined for variant {variant}")]
    WrongVariant { op: &'static str, variant: String },
    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },
    #[error("degenerate denominator: causal best {causal_best} must exceed augmented best {aug_best}")]
    DegenerateDenominator { causal_best: f64, aug_best: f64 },
    #[error("argument out of range: {0}")]
    OutOfRange(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, KetError>;
