use thiserror::Error;

/// Errors produced by the protocol stack.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A graph property required by the protocol does not hold.
    #[error("topology assumption violated: {0}")]
    Assumption(String),

    #[error("protocol error in round {round} at agent {agent}: {reason}")]
    Protocol {
        round: usize,
        agent: usize,
        reason: String,
    },

    #[error("modulus {q} is below the required minimum {required}")]
    ModulusTooSmall { q: u64, required: u128 },

    #[error("consensus has not converged: {0}")]
    NotConverged(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn protocol(round: usize, agent: usize, reason: impl Into<String>) -> Self {
        Error::Protocol {
            round,
            agent,
            reason: reason.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
