use thiserror::Error;

/// Errors raised by the inference engine.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum CviError {
    /// A parameter vector lies outside the natural domain or the mean-parameter image.
    #[error("parameter out of domain: {0}")]
    OutOfDomain(String),

    #[error("{what} did not converge after {iterations} iterations")]
    NonConvergence { what: &'static str, iterations: usize },

    #[error("family mismatch: expected {expected}, got {got}")]
    FamilyMismatch { expected: String, got: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    /// A derivative or function value was not finite at a sampled point.
    #[error("non-finite {quantity} at z = {at}")]
    Estimation { quantity: &'static str, at: f64 },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<CviError>,
    },
}

impl CviError {
    pub fn out_of_domain(msg: impl Into<String>) -> Self {
        CviError::OutOfDomain(msg.into())
    }

    pub fn at_iteration(self, iteration: usize) -> Self {
        match self {
            e @ CviError::AtIteration { .. } => e,
            e => CviError::AtIteration {
                iteration,
                source: Box::new(e),
            },
        }
    }

    /// True when the error (or the wrapped one) is a domain violation.
    pub fn is_out_of_domain(&self) -> bool {
        match self {
            CviError::OutOfDomain(_) => true,
            CviError::AtIteration { source, .. } => source.is_out_of_domain(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, CviError>;
