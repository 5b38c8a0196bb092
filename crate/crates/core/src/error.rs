use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid hyperparameter or option. `field` names the offending key.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("input error: {0}")]
    Input(String),

    /// A tensor produced a NaN or infinite value.
    #[error("non-finite value in `{tensor}`")]
    NonFinite { tensor: String },

    #[error("infeasible budget: rho * T_full = {budget:.0} is below the forward cost T_fp = {forward}")]
    InfeasibleBudget { budget: f64, forward: u64 },

    #[error("profiling error: {0}")]
    Profile(String),

    /// Brute-force enumeration refused because the candidate set is too large.
    #[error("brute force refused: {candidates} candidates exceeds the limit of {limit}")]
    TooLarge { candidates: usize, limit: usize },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
