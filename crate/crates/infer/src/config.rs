use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{InferError, Result};

/// Connection and decoding settings for one endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    /// Base URL up to and including the API version, e.g. `http://host:8000/v1`.
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token. The token
    /// itself is never stored in configuration.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub backoff_base_secs: f64,
    pub max_in_flight: usize,
    pub temperature: f64,
    pub max_tokens: u32,
    /// Downscale images wider than the evaluation width before upload, so the
    /// model answers in the same coordinate space as the ground truth.
    pub resize_images: bool,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: "http://127.0.0.1:8000/v1".to_string(),
            model: "default".to_string(),
            api_key_env: "MEDBENCH_API_KEY".to_string(),
            timeout_secs: 120.0,
            max_retries: 3,
            backoff_base_secs: 1.0,
            max_in_flight: 4,
            temperature: 0.0,
            max_tokens: 1024,
            resize_images: true,
        }
    }
}

impl EndpointConfig {
    pub fn check(&self) -> Result<()> {
        if self.max_in_flight < 1 {
            return Err(InferError::Config(
                "max_in_flight must be at least 1".into(),
            ));
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(InferError::Config("timeout must be positive".into()));
        }
        if !(self.backoff_base_secs.is_finite() && self.backoff_base_secs >= 0.0) {
            return Err(InferError::Config(
                "backoff base must be non-negative".into(),
            ));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(InferError::Config(
                "temperature must be non-negative".into(),
            ));
        }
        if self.base_url.trim().is_empty() || self.model.trim().is_empty() {
            return Err(InferError::Config("base_url and model are required".into()));
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub(crate) fn url(&self, path: &str) -> String {
        format!("{}/{}", self.base_url.trim_end_matches('/'), path)
    }

    pub(crate) fn api_key(&self) -> Option<String> {
        std::env::var(&self.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
    }
}
