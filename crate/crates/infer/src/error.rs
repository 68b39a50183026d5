use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum InferError {
    #[error("invalid endpoint config: {0}")]
    Config(String),

    #[error("endpoint preflight failed: {0}")]
    Preflight(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Log {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("response log does not match the dataset: {}", describe(.changed, .missing))]
    LogMismatch {
        /// Samples whose request fingerprint differs from the logged one.
        changed: Vec<String>,
        /// Samples with no log entry at all.
        missing: Vec<String>,
    },

    #[error(transparent)]
    Core(#[from] medbench_core::Error),
}

fn describe(changed: &[String], missing: &[String]) -> String {
    const SHOWN: usize = 20;
    let list = |ids: &[String]| {
        let mut s = ids
            .iter()
            .take(SHOWN)
            .cloned()
            .collect::<Vec<_>>()
            .join(", ");
        if ids.len() > SHOWN {
            s.push_str(&format!(", ... ({} total)", ids.len()));
        }
        s
    };
    let mut parts = Vec::new();
    if !changed.is_empty() {
        parts.push(format!("fingerprint changed for [{}]", list(changed)));
    }
    if !missing.is_empty() {
        parts.push(format!("no entry for [{}]", list(missing)));
    }
    parts.join("; ")
}

impl InferError {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        InferError::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T, E = InferError> = std::result::Result<T, E>;
