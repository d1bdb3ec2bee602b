use thiserror::Error;

/// Errors produced by the design library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("invalid variance components: {0}")]
    InvalidVariance(String),

    /// V is not positive definite (for example `sigma2_eps == 0`).
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    /// The fixed-effects information matrix is rank deficient.
    #[error("model not identifiable; rank-deficient columns: {}", columns.join(", "))]
    NotIdentifiable { columns: Vec<String> },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("design space has {candidates} candidates, above the cap of {cap}; use the cross-entropy search instead")]
    CandidateCapExceeded { candidates: u128, cap: u128 },

    #[error("search failed: {0}")]
    SearchFailure(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
