//! Benchmark harness for annotation-grounded vision-language prompting on
//! medical images: dataset compilation, tolerant response parsing, counting,
//! pointing and detection metrics, comparison reports and training manifests.

pub mod assign;
pub mod dataset;
pub mod digest;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod parser;
pub mod prompt;
pub mod report;

pub use error::{Error, RejectReason, Result};
pub use metrics::{EvalOptions, Metric, SamplePair, TaskReport};
pub use model::{AnnotationSet, BBox, ImageRecord, Point, SourceKind, TaskKind};
pub use parser::{parse_response, ParseContext, ParseStatus, Prediction};
pub use report::{render_report, EvalReport, ReportFormat};
