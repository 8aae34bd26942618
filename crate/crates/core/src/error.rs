use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A precondition of an operation was not met by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite state at step {step} (t = {t:.6}): {detail}")]
    NonFinite { step: usize, t: f64, detail: String },

    #[error("label {requested:?} out of sampled range; nearest available label is {nearest:?}")]
    LabelOutOfRange {
        requested: Vec<f64>,
        nearest: Vec<f64>,
    },

    #[error("column {name:?} not found; available columns: {}", available.join(", "))]
    MissingColumn { name: String, available: Vec<String> },

    #[error("eigensolver failed: {0}")]
    Eigen(String),

    #[error("linear solve failed: {0}")]
    Solve(String),

    #[error("did not converge: {0}")]
    Convergence(String),

    #[error("invalid model file: {0}")]
    Format(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            got,
        })
    }
}
