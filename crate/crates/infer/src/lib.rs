//! Client for OpenAI-compatible vision chat endpoints.
//!
//! [`run_inference`] sends each instruction sample (image plus instruction
//! text) to `POST {base}/chat/completions` with bounded concurrency and
//! retries, appending every outcome to a JSONL [`ResponseLogEntry`] log.
//! [`replay_log`] turns a log back into raw responses for evaluation.

pub mod client;
pub mod config;
pub mod error;
pub mod log;
#[cfg(feature = "mock")]
pub mod mock;
pub mod request;

pub use client::{run_inference, sample_fingerprint, RunOptions, RunSummary};
pub use config::EndpointConfig;
pub use error::{InferError, Result};
pub use log::{read_log, replay_log, EntryStatus, ResponseLogEntry};
pub use request::{encode_request, EncodedRequest};
