use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or config, or a missing upstream stage.
    #[error("{0}")]
    Usage(String),
    /// The stage wrote usable but incomplete output.
    #[error("{0}")]
    Partial(String),
    /// Inputs were produced under incompatible configurations.
    #[error("fingerprint mismatch: {0}")]
    FingerprintMismatch(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Failed(_) => 1,
            CliError::Partial(_) => 2,
            CliError::FingerprintMismatch(_) => 3,
        }
    }
}

/// Wraps a library error as a plain failure.
pub fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}
