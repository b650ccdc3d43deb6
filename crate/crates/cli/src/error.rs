use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] securegp::Error),

    #[error("cannot write {path}: {reason}")]
    Output { path: String, reason: String },

    #[error("privacy audit failed: {0}")]
    AuditFailed(String),
}

impl CliError {
    /// 0 success, 1 validation error, 2 protocol error, 3 audit failure.
    pub fn exit_code(&self) -> i32 {
        use securegp::Error as E;
        match self {
            CliError::Config(_) => 1,
            CliError::Core(E::InvalidArgument(_) | E::Assumption(_) | E::ModulusTooSmall { .. } | E::Io(_)) => 1,
            CliError::Core(_) | CliError::Output { .. } => 2,
            CliError::AuditFailed(_) => 3,
        }
    }
}
