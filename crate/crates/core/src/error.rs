use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration invariant does not hold. `field` names the offending field.
    #[error("invalid `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("index out of range: {0}")]
    Index(String),

    /// Numeric content of a trace is malformed (row sums, negative mass, NaN).
    #[error("data error: {0}")]
    Data(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("budget {fraction} is infeasible: minimum feasible fraction is {min_fraction} (sink scales alone need {sink_tokens} tokens, cap is {token_cap})")]
    Budget {
        fraction: f64,
        min_fraction: f64,
        sink_tokens: u64,
        token_cap: u64,
    },

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("oracle guard: {candidates} candidates exceed the limit of {limit}; shrink the instance")]
    OracleGuard { candidates: usize, limit: usize },

    #[error("plan is inconsistent: {0}")]
    Consistency(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl std::fmt::Display) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
