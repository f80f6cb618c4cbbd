use thiserror::Error;

/// Errors raised by the numerical modules.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Malformed or out-of-range input (dimension mismatch, bad parameter).
    #[error("input error: {0}")]
    Input(String),
    /// A construction that would produce an empty or degenerate object.
    #[error("degenerate: {0}")]
    Degenerate(String),
    /// A precondition of an operation is not met by its arguments.
    #[error("precondition violated: {0}")]
    Precondition(String),
    /// A walk or path did not terminate within its step budget.
    #[error("no termination after {steps} steps")]
    NonTermination { steps: usize },
    /// An iterative solver stopped at its iteration limit.
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },
    /// A branched majorant violates its structural contract (contiguity, missing extension).
    #[error("structural error: {0}")]
    Structural(String),
    /// Missing witness for a query point.
    #[error("no witness: {0}")]
    NoWitness(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
