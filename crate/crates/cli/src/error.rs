use std::fmt;
use std::path::Path;

use peerfeedback_core::annotator::AnnotateError;
use peerfeedback_core::eval::EvalError;
use peerfeedback_core::gateway::{GatewayError, ProfileError};
use peerfeedback_core::ingest::IngestError;
use peerfeedback_core::io::IoError;
use peerfeedback_core::selfimprove::SelfImproveError;

/// A failed command. Each kind maps to one process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or a missing input artifact.
    Usage(String),
    /// Input data or configuration failed validation.
    Validation(String),
    Backend(String),
    /// Some work finished and a checkpoint or partial file was written.
    Partial(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Backend(_) => 3,
            CliError::Partial(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Validation(m) => write!(f, "validation error: {m}"),
            CliError::Backend(m) => write!(f, "backend error: {m}"),
            CliError::Partial(m) => write!(f, "partial result: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Fails with a usage error naming `what` unless `path` exists.
pub fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} not found: {}", path.display())))
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Io { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::Precondition(_) => CliError::Validation(e.to_string()),
            _ => CliError::Backend(e.to_string()),
        }
    }
}

impl From<ProfileError> for CliError {
    fn from(e: ProfileError) -> Self {
        match e {
            ProfileError::Read { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<SelfImproveError> for CliError {
    fn from(e: SelfImproveError) -> Self {
        match e {
            SelfImproveError::Gateway(g) => g.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<AnnotateError> for CliError {
    fn from(e: AnnotateError) -> Self {
        match e {
            AnnotateError::Chunk { .. } => CliError::Backend(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::Validation(e.to_string())
    }
}
