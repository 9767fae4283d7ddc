use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, RavlError>;

#[derive(Debug, Error)]
pub enum RavlError {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("degenerate embedding: zero norm")]
    ZeroNorm,

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible world spec: {0}")]
    Infeasible(String),

    #[error("corrupt embedding file at byte {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl RavlError {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            RavlError::Corrupt { .. } => 3,
            RavlError::MissingArtifact(_) => 4,
            RavlError::Config(_) | RavlError::InvalidArgument(_) => 2,
            _ => 1,
        }
    }
}
