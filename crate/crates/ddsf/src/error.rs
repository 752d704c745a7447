//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A vector or matrix had the wrong size for the operation.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A precondition on the arguments was violated.
    #[error("{0}")]
    InvalidArgument(String),

    /// A point violated a constraint set where membership is required.
    #[error("constraint violated: {0}")]
    ConstraintViolation(String),

    /// Data failed the assumption checks required by the filter.
    #[error("assumption validation failed:\n{0}")]
    ValidationFailed(String),

    /// The safety-filter QP reported infeasibility; this signals a violated
    /// recursive-feasibility precondition and is never swallowed.
    #[error("QP infeasible: {0}")]
    Infeasible(String),

    /// The QP solver exhausted its iteration budget without converging.
    #[error("QP solver hit the iteration limit ({iterations} iterations): {context}")]
    SolverStalled { iterations: usize, context: String },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
