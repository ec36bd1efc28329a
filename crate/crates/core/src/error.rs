use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: String },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("evaluation does not belong to this graph")]
    ForeignEvaluation,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("weight layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("chain diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("undefined: {0}")]
    Undefined(String),

    #[error("too few samples: {0}")]
    TooFewSamples(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
