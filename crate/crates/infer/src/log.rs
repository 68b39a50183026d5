//! Append-only JSONL response log.
//!
//! Each line is one [`ResponseLogEntry`]. The file is only ever appended to,
//! one complete line per write, so an interrupted run leaves at worst a
//! truncated final line, which readers ignore and writers cut off before
//! appending.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{Read, Seek, SeekFrom};
use std::path::Path;

use medbench_core::dataset::InstructionSample;
use serde::{Deserialize, Serialize};

use crate::config::EndpointConfig;
use crate::error::{InferError, Result};
use crate::request::fingerprint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseLogEntry {
    pub sample_id: String,
    pub fingerprint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub resize_images: bool,
    pub status: EntryStatus,
    /// Raw model text; empty for failed entries.
    pub response: String,
    pub latency_ms: u64,
    pub http_status: Option<u16>,
    pub attempts: u32,
    pub timestamp_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
}

impl ResponseLogEntry {
    /// The endpoint settings that shaped this request, as far as they enter
    /// the fingerprint.
    pub fn request_config(&self) -> EndpointConfig {
        EndpointConfig {
            model: self.model.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            resize_images: self.resize_images,
            ..EndpointConfig::default()
        }
    }
}

/// Read every complete entry. A malformed final line without a trailing
/// newline is the remains of an interrupted write and is skipped; any other
/// malformed line is an error.
pub fn read_log(path: &Path) -> Result<Vec<ResponseLogEntry>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(InferError::io(format!("reading {}", path.display()), e)),
    };
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(e) => out.push(e),
            Err(_) if i + 1 == lines.len() && !complete => {
                tracing::warn!(path = %path.display(), line = i + 1, "ignoring truncated final log line");
            }
            Err(e) => {
                return Err(InferError::Log {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Cut a trailing partial line so the next append starts on a fresh line.
pub(crate) fn truncate_partial_tail(path: &Path) -> Result<()> {
    let ctx = || format!("repairing {}", path.display());
    let mut f = match OpenOptions::new().read(true).write(true).open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(InferError::io(ctx(), e)),
    };
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)
        .map_err(|e| InferError::io(ctx(), e))?;
    if buf.is_empty() || buf.ends_with(b"\n") {
        return Ok(());
    }
    let keep = buf.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    f.set_len(keep as u64)
        .map_err(|e| InferError::io(ctx(), e))?;
    f.seek(SeekFrom::End(0))
        .map_err(|e| InferError::io(ctx(), e))?;
    Ok(())
}

/// Latest entry per sample id.
pub fn latest_entries(entries: Vec<ResponseLogEntry>) -> HashMap<String, ResponseLogEntry> {
    let mut map = HashMap::with_capacity(entries.len());
    for e in entries {
        map.insert(e.sample_id.clone(), e);
    }
    map
}

/// Resolve every sample to its logged response text. Failed entries give an
/// empty string, which the parser treats as a failed parse.
///
/// Fingerprints are recomputed from the samples (and their images) with the
/// model and decoding settings recorded in each entry, so a sample whose
/// instruction or image changed since the run is rejected.
pub fn replay_log(path: &Path, samples: &[InstructionSample]) -> Result<Vec<(String, String)>> {
    let entries = latest_entries(read_log(path)?);
    let mut changed = Vec::new();
    let mut missing = Vec::new();
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let Some(e) = entries.get(&s.sample_id) else {
            missing.push(s.sample_id.clone());
            continue;
        };
        let digest = match fs::read(&s.image.uri) {
            Ok(bytes) => medbench_core::digest::bytes_digest(&bytes),
            Err(_) => format!("unreadable:{}", s.image.uri),
        };
        if fingerprint(s, &digest, &e.request_config()) != e.fingerprint {
            changed.push(s.sample_id.clone());
            continue;
        }
        let text = match e.status {
            EntryStatus::Ok => e.response.clone(),
            EntryStatus::Failed => String::new(),
        };
        out.push((s.sample_id.clone(), text));
    }
    if !changed.is_empty() || !missing.is_empty() {
        return Err(InferError::LogMismatch { changed, missing });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn entry(id: &str, status: EntryStatus) -> ResponseLogEntry {
        ResponseLogEntry {
            sample_id: id.into(),
            fingerprint: format!("fp-{id}"),
            model: "m".into(),
            temperature: 0.0,
            max_tokens: 16,
            resize_images: true,
            status,
            response: "{}".into(),
            latency_ms: 3,
            http_status: Some(200),
            attempts: 1,
            timestamp_ms: 0,
            error: None,
            config_digest: None,
        }
    }

    #[test]
    fn truncated_tail_is_ignored_and_repaired() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let mut f = fs::File::create(&path).unwrap();
        writeln!(
            f,
            "{}",
            serde_json::to_string(&entry("a", EntryStatus::Ok)).unwrap()
        )
        .unwrap();
        write!(f, "{{\"sample_id\": \"b\", \"fingerp").unwrap();
        drop(f);
        assert_eq!(read_log(&path).unwrap().len(), 1);
        truncate_partial_tail(&path).unwrap();
        assert!(fs::read_to_string(&path).unwrap().ends_with("}\n"));
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let good = serde_json::to_string(&entry("a", EntryStatus::Ok)).unwrap();
        fs::write(&path, format!("{good}\nnot json\n{good}\n")).unwrap();
        let err = read_log(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn later_entries_win() {
        let map = latest_entries(vec![
            entry("a", EntryStatus::Failed),
            entry("a", EntryStatus::Ok),
        ]);
        assert_eq!(map["a"].status, EntryStatus::Ok);
    }

    #[test]
    fn missing_log_reads_empty() {
        assert!(read_log(Path::new("/nonexistent/log.jsonl"))
            .unwrap()
            .is_empty());
    }
}
