use std::path::Path;

use thiserror::Error;

/// Pipeline failure, grouped by the process exit code it maps to.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("training failure: {0}")]
    Training(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Solver(_) => 3,
            Self::Training(_) => 4,
            Self::Data(_) => 5,
            Self::Verification(_) | Self::Internal(_) => 1,
        }
    }

    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::Data(format!("{}: {e}", path.display()))
    }

    /// Attaches the stage and subject to a core error.
    pub(crate) fn within(stage: &str, subject: &str, e: turbgate::Error) -> Self {
        let msg = format!("{stage} [{subject}]: {e}");
        match e {
            turbgate::Error::InvalidArgument(_) => Self::Config(msg),
            turbgate::Error::NonConvergence { .. }
            | turbgate::Error::NumericalFailure(_)
            | turbgate::Error::LinearStagnation { .. } => Self::Solver(msg),
            turbgate::Error::Training(_) => Self::Training(msg),
            turbgate::Error::Parse(_) | turbgate::Error::Io(_) => Self::Data(msg),
            turbgate::Error::Internal(_) => Self::Internal(msg),
        }
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;
