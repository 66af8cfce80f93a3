use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    Shape {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("expert failed too often: {successes} successful episodes after {attempts} attempts (needed {needed})")]
    ExpertFailure {
        successes: usize,
        attempts: usize,
        needed: usize,
    },

    #[error("unsupported state dimension {0}: only 2-D state spaces are supported")]
    UnsupportedDimension(usize),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: usize, got: usize) -> Self {
        Error::Shape { context, expected, got }
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::shape(context, expected, got))
    }
}
