use thiserror::Error;

/// Errors raised by the AGP library.
#[derive(Debug, Error)]
pub enum AgpError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("matrix is not positive definite ({0})")]
    NotPositiveDefinite(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("enumeration budget exceeded: {states} states > {limit}")]
    BudgetExceeded { states: u128, limit: u128 },

    #[error("chain too short: {len} steps < {min}")]
    ChainTooShort { len: usize, min: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("sampler failed at iteration {iteration}: {source}")]
    Sampler {
        iteration: usize,
        #[source]
        source: Box<AgpError>,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl AgpError {
    /// True for failures of the numerical layer (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        match self {
            AgpError::NotPositiveDefinite(_) | AgpError::NonFinite(_) => true,
            AgpError::Sampler { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, AgpError>;
