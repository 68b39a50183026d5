//! Stable content digests for configuration objects.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Hex SHA-256 of the canonical JSON form of `value` (object keys sorted
/// recursively, compact separators).
pub fn config_digest<T: Serialize + ?Sized>(value: &T) -> String {
    let value = serde_json::to_value(value).expect("configuration values serialize to JSON");
    let canonical = serde_json::to_vec(&sorted(value)).expect("JSON values serialize");
    hex::encode(Sha256::digest(&canonical))
}

fn sorted(value: Value) -> Value {
    match value {
        Value::Object(map) => {
            let mut entries: Vec<(String, Value)> = map.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sorted(v))).collect())
        }
        Value::Array(items) => Value::Array(items.into_iter().map(sorted).collect()),
        other => other,
    }
}

/// Config digest and top-level seed stamped into every emitted artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_digest: String,
    pub seed: u64,
}

/// Hex SHA-256 of raw bytes.
pub fn bytes_digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
