use medbench_infer::InferError;
use serde_json::json;
use thiserror::Error;

/// Failures grouped by exit status: 1 data, 2 usage, 3 endpoint.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Endpoint(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Data(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Endpoint(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Data(_) => "data",
            CliError::Usage(_) => "usage",
            CliError::Endpoint(_) => "endpoint",
        }
    }

    /// Single-line JSON written to stderr.
    pub fn to_json(&self) -> String {
        json!({"error": {"kind": self.kind(), "code": self.exit_code(), "message": self.to_string()}})
            .to_string()
    }
}

impl From<medbench_core::Error> for CliError {
    fn from(e: medbench_core::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<InferError> for CliError {
    fn from(e: InferError) -> Self {
        match e {
            InferError::Preflight(_) => CliError::Endpoint(e.to_string()),
            InferError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
