use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Shapes, dimensions or preconditions that the caller got wrong.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    /// The state became non-finite during integration.
    #[error("integration diverged at t = {time}")]
    Divergence { time: f64 },

    #[error("step size underflow at t = {time} (h = {step:e}); problem is too stiff")]
    Stiffness { time: f64, step: f64 },

    #[error("no observations within the first {fraction} of the window")]
    EmptyWindow { fraction: f64 },

    #[error("training unstable: {aborted} of {total} minibatches aborted in epoch {epoch}")]
    TrainingInstability { epoch: usize, aborted: usize, total: usize },

    #[error("ensemble degenerate: {dropped} of {requested} members diverged")]
    EnsembleDegenerate { dropped: usize, requested: usize },

    #[error("query infeasible: effective sample size {ess:.3} < 5 (best distance {best_distance:.4})")]
    QueryInfeasible { ess: f64, best_distance: f64 },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation { field: field.into(), message: message.into() }
    }

    /// True for failures caused by the learned dynamics blowing up.
    pub fn is_solver_failure(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::Stiffness { .. } | Error::NumericDomain(_))
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
