use std::path::PathBuf;

use thiserror::Error;

use crate::model::TaskKind;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid image dimensions {width}x{height}")]
    InvalidImage { width: i64, height: i64 },

    #[error("record rejected: {0}")]
    Rejected(#[from] RejectReason),

    #[error("question bank has no templates for task {0}")]
    EmptyQuestionBank(TaskKind),

    #[error("question index {index} out of range for task {task} ({len} templates)")]
    QuestionIndex {
        task: TaskKind,
        index: usize,
        len: usize,
    },

    #[error("invalid question bank: {0}")]
    InvalidBank(String),

    #[error("task {task} unsupported for annotation '{label}': missing {missing} geometry")]
    UnsupportedTask {
        task: TaskKind,
        label: String,
        missing: &'static str,
    },

    #[error("test size {requested} exceeds available {available} {unit}s")]
    SplitTooLarge {
        requested: usize,
        available: usize,
        unit: &'static str,
    },

    #[error("metric undefined: {0}")]
    EmptyInput(&'static str),

    #[error("mixed tasks in evaluation: expected {expected}, found {found}")]
    MixedTasks { expected: TaskKind, found: TaskKind },

    #[error("truth and predictions disagree on sample ids: {}", describe_mismatch(.missing, .unexpected))]
    SampleMismatch {
        /// Truth samples without a prediction.
        missing: Vec<String>,
        /// Predictions without a truth sample.
        unexpected: Vec<String>,
    },

    #[error("no ground-truth boxes in evaluation set")]
    NoGroundTruthBoxes,

    #[error("report systems cover different tasks: {0}")]
    TaskCoverage(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("{path}:{line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn describe_mismatch(missing: &[String], unexpected: &[String]) -> String {
    const SHOWN: usize = 10;
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
    if !missing.is_empty() {
        parts.push(format!("no prediction for [{}]", list(missing)));
    }
    if !unexpected.is_empty() {
        parts.push(format!("no truth for [{}]", list(unexpected)));
    }
    parts.join("; ")
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

/// Why a ground-truth record could not be repaired into a valid annotation.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RejectReason {
    #[error("box {index} has zero area after clamping")]
    DegenerateBox { index: usize },
    #[error("box count {boxes} disagrees with point count {points}")]
    GeometryConflict { boxes: usize, points: usize },
    #[error("empty label")]
    EmptyLabel,
    #[error("non-finite coordinate")]
    NonFinite,
}

impl RejectReason {
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::DegenerateBox { .. } => "degenerate-box",
            RejectReason::GeometryConflict { .. } => "geometry-conflict",
            RejectReason::EmptyLabel => "empty-label",
            RejectReason::NonFinite => "non-finite",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
