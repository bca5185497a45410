use thiserror::Error;

use crate::solver::FlowState;

/// Per-iteration residual norms, one entry per solved equation.
pub type ResidualHistory = Vec<Vec<f64>>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("solver did not converge: {reason} after {} iterations", history.len())]
    NonConvergence {
        reason: String,
        history: ResidualHistory,
        partial: Option<Box<FlowState>>,
    },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("linear solver stagnated after {} iterations (last residual {last:.3e})", history.len())]
    LinearStagnation { history: Vec<f64>, last: f64 },

    #[error("training failed: {0}")]
    Training(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
