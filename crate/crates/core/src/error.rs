use thiserror::Error;

/// Errors raised across the retrieval, preference and training stages.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("vector norm is below 1e-12 and cannot be normalized")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("evaluation set is empty")]
    EmptyEval,
    #[error("configured domain `{0}` has no training examples")]
    MissingDomain(String),
    #[error("domain `{0}` is not in the configured domain set")]
    UnknownDomain(String),
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("domain mismatch: expected `{expected}`, got `{got}`")]
    DomainMismatch { expected: String, got: String },
    #[error("index is empty")]
    EmptyIndex,
    #[error("score at position {0} is not strictly positive")]
    NonPositiveScore(usize),
    #[error("scores increase at position {0}")]
    UnsortedScores(usize),
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("xi_bar must lie in (0, 1], got {0}")]
    InvalidXiBar(f64),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("answer model failed: {0}")]
    ModelFailure(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("cross-modal pair `{0}` carries no noisy input")]
    MissingNoisyInput(String),
    #[error("no pairs in the requested subset")]
    EmptySubset,
    #[error("policy does not expose input gradients")]
    GradientUnavailable,
    #[error("denominator is zero for {0}")]
    ZeroDenominator(&'static str),
    #[error("finite-difference grid too coarse: halving the step changed the result by {0:.3}%")]
    GridTooCoarse(f64),
    #[error("only one class present; AUROC is undefined")]
    SingleClass,
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;
