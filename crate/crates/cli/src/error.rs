use std::path::PathBuf;

use beamsched_core::Error as CoreError;
use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("validation failed: {0}")]
    Validation(CoreError),

    #[error("solver failed: {context}: {source}")]
    Solver {
        context: String,
        #[source]
        source: CoreError,
    },

    #[error("{0}")]
    PropertyFailure(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 1 for bad input, 2 for solver failures, 3 for failed property checks.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } | CliError::Validation(_) | CliError::Io { .. } => 1,
            CliError::Solver { .. } => 2,
            CliError::PropertyFailure(_) => 3,
        }
    }

    /// Sorts a core error into validation or solver failure.
    pub fn from_core(context: impl Into<String>, e: CoreError) -> Self {
        match e {
            CoreError::NoConvergence { .. }
            | CoreError::SingularSystem { .. }
            | CoreError::DegenerateChain { .. }
            | CoreError::BracketFailure { .. }
            | CoreError::IndexState { .. } => CliError::Solver {
                context: context.into(),
                source: e,
            },
            other => CliError::Validation(other),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}
