use thiserror::Error;

/// Errors produced by policies, reward models, datasets, and drivers.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("prompt not in support")]
    PromptNotInSupport,

    #[error("horizon mismatch: expected {expected}, got {actual}")]
    HorizonMismatch { expected: usize, actual: usize },

    #[error("token out of range")]
    TokenOutOfRange,

    #[error("empty sample request")]
    EmptySampleRequest,

    #[error("enumeration too large: {vocab}^{horizon} exceeds cap {cap}")]
    EnumerationTooLarge {
        vocab: u32,
        horizon: u32,
        cap: usize,
    },

    #[error("pair not in table")]
    PairNotInTable,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("KL undefined: policy has support where the reference has none")]
    KlUndefined,

    #[error("degenerate: policy reproduces demonstrations exactly")]
    DegeneratePairs,

    #[error("prompt sets disagree between operands")]
    PromptSetMismatch,

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },

    #[error("invalid {what}: {why}")]
    Invalid { what: &'static str, why: String },

    #[error("{path}:{line}: {msg}")]
    Jsonl {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub(crate) fn invalid(what: &'static str, why: impl Into<String>) -> Self {
        CoreError::Invalid {
            what,
            why: why.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
