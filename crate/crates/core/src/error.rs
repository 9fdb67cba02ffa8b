use thiserror::Error;

/// Errors raised by the model, the single-user solvers and the index code.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("state {state} outside 0..={max}")]
    StateOutOfRange { state: usize, max: usize },

    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },

    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("singular linear system: pivot {pivot:e} at row {row}")]
    SingularSystem { row: usize, pivot: f64 },

    #[error("degenerate chain: threshold {threshold} makes every state passive")]
    DegenerateChain { threshold: usize },

    #[error("no sign change of the activity predicate within [{lo:e}, {hi:e}]")]
    BracketFailure { lo: f64, hi: f64 },

    #[error("index iteration at state {state} failed: {source}")]
    IndexState {
        state: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field,
            reason: reason.into(),
        }
    }
}
