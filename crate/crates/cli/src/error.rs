use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad arguments, bad config or missing inputs; exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Failure while running an experiment; exit code 1.
    #[error(transparent)]
    Runtime(#[from] decil_core::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) | CliError::Io { .. } => 1,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
