use thiserror::Error;

/// Coarse failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad parameters or inconsistent options.
    Usage,
    /// Malformed, mismatched or unreadable input data.
    Data,
    /// A numerical routine failed (factorization, convergence).
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty problem: {0}")]
    EmptyProblem(&'static str),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("outlier budget {budget} too large for {entries} weights")]
    BudgetTooLarge { budget: usize, entries: usize },

    #[error("power method did not converge after {iterations} iterations (estimate {estimate}, residual {residual})")]
    NotConverged {
        estimate: f64,
        iterations: usize,
        residual: f64,
    },

    #[error("matrix is not positive definite (pivot {pivot} = {value}); increase the damping fraction (--damping)")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("relative error undefined: ||WX||_F^2 is zero")]
    ZeroReference,

    #[error("solution is not on the quantization grid at ({row}, {col})")]
    Infeasible { row: usize, col: usize },

    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },

    #[error("{field} mismatch: stored {stored}, recomputed {recomputed}")]
    FooterMismatch {
        field: &'static str,
        stored: f64,
        recomputed: f64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidParameter { .. } | Error::Config(_) => ErrorKind::Usage,
            Error::NotConverged { .. } | Error::NotPositiveDefinite { .. } | Error::BudgetTooLarge { .. } => {
                ErrorKind::Numerical
            }
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn dims(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
