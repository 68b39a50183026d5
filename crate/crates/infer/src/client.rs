//! Bounded-concurrency inference run with retries and resume.

use std::collections::HashSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use medbench_core::dataset::InstructionSample;
use rand::Rng;
use reqwest::StatusCode;
use serde_json::Value;
use tokio::sync::{mpsc, Semaphore};
use tokio::task::JoinSet;

use crate::config::EndpointConfig;
use crate::error::{InferError, Result};
use crate::log::{read_log, truncate_partial_tail, EntryStatus, ResponseLogEntry};
use crate::request::{encode_request, fingerprint, response_text};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Re-request samples whose latest log entry is a failure. By default any
    /// logged fingerprint counts as done.
    pub retry_failed: bool,
    /// Stamped on every log entry written by the run.
    pub config_digest: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub total: usize,
    /// Already present in the log.
    pub skipped: usize,
    pub succeeded: usize,
    pub failed: usize,
    /// HTTP requests issued, including the preflight and retries.
    pub http_requests: u64,
}

/// Fingerprint of the request a sample would produce, without encoding it.
pub fn sample_fingerprint(sample: &InstructionSample, cfg: &EndpointConfig) -> String {
    let digest = match std::fs::read(&sample.image.uri) {
        Ok(bytes) => medbench_core::digest::bytes_digest(&bytes),
        Err(_) => format!("unreadable:{}", sample.image.uri),
    };
    fingerprint(sample, &digest, cfg)
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn build_client(cfg: &EndpointConfig) -> Result<reqwest::Client> {
    reqwest::Client::builder()
        .timeout(cfg.timeout())
        .pool_max_idle_per_host(cfg.max_in_flight)
        .build()
        .map_err(|e| InferError::Config(format!("http client: {e}")))
}

fn authorized(req: reqwest::RequestBuilder, cfg: &EndpointConfig) -> reqwest::RequestBuilder {
    match cfg.api_key() {
        Some(key) => req.bearer_auth(key),
        None => req,
    }
}

/// `GET {base}/models`. Servers without a model listing (404) still count as
/// reachable; connection failures, auth failures and server errors do not.
pub async fn preflight(client: &reqwest::Client, cfg: &EndpointConfig) -> Result<()> {
    let url = cfg.url("models");
    let resp = authorized(client.get(&url), cfg)
        .send()
        .await
        .map_err(|e| InferError::Preflight(format!("{url}: {e}")))?;
    let status = resp.status();
    if status.is_success() || status == StatusCode::NOT_FOUND {
        Ok(())
    } else {
        Err(InferError::Preflight(format!("{url}: HTTP {status}")))
    }
}

fn retryable(status: StatusCode) -> bool {
    status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error()
}

/// Full-jitter exponential backoff: uniform in `[0, base * 2^attempt]`.
pub fn backoff_delay(base_secs: f64, attempt: u32) -> Duration {
    let cap = base_secs * 2f64.powi(attempt.min(30) as i32);
    if cap <= 0.0 {
        return Duration::ZERO;
    }
    Duration::from_secs_f64(rand::rng().random_range(0.0..=cap))
}

async fn process(
    client: reqwest::Client,
    cfg: Arc<EndpointConfig>,
    sample: InstructionSample,
    requests: Arc<AtomicU64>,
    config_digest: Option<String>,
) -> ResponseLogEntry {
    let enc_cfg = Arc::clone(&cfg);
    let encoded = tokio::task::spawn_blocking(move || encode_request(&sample, &enc_cfg))
        .await
        .expect("encoding task panicked");
    let mut entry = ResponseLogEntry {
        sample_id: encoded.sample_id,
        fingerprint: encoded.fingerprint,
        model: cfg.model.clone(),
        temperature: cfg.temperature,
        max_tokens: cfg.max_tokens,
        resize_images: cfg.resize_images,
        status: EntryStatus::Failed,
        response: String::new(),
        latency_ms: 0,
        http_status: None,
        attempts: 0,
        timestamp_ms: now_ms(),
        error: None,
        config_digest,
    };
    let body = match encoded.body {
        Ok(b) => b,
        Err(e) => {
            tracing::warn!(sample = %entry.sample_id, "{e}");
            entry.error = Some(e);
            return entry;
        }
    };

    let url = cfg.url("chat/completions");
    for attempt in 0..=cfg.max_retries {
        entry.attempts = attempt + 1;
        requests.fetch_add(1, Ordering::Relaxed);
        let started = Instant::now();
        let result = authorized(client.post(&url), &cfg).json(&body).send().await;
        let outcome = match result {
            Ok(resp) => {
                let status = resp.status();
                entry.http_status = Some(status.as_u16());
                if status.is_success() {
                    match resp.json::<Value>().await {
                        Ok(v) => match response_text(&v) {
                            Some(text) => Ok(text),
                            None => Err((false, "response has no message content".to_string())),
                        },
                        Err(e) => Err((e.is_timeout(), format!("reading response: {e}"))),
                    }
                } else {
                    let text = resp.text().await.unwrap_or_default();
                    let snippet: String = text.chars().take(200).collect();
                    Err((retryable(status), format!("HTTP {status}: {snippet}")))
                }
            }
            Err(e) => Err((true, format!("request: {e}"))),
        };
        entry.latency_ms = started.elapsed().as_millis() as u64;
        entry.timestamp_ms = now_ms();
        match outcome {
            Ok(text) => {
                entry.status = EntryStatus::Ok;
                entry.response = text;
                entry.error = None;
                return entry;
            }
            Err((retry, msg)) => {
                tracing::debug!(sample = %entry.sample_id, attempt = attempt + 1, "{msg}");
                entry.error = Some(msg);
                if !retry || attempt == cfg.max_retries {
                    break;
                }
                tokio::time::sleep(backoff_delay(cfg.backoff_base_secs, attempt)).await;
            }
        }
    }
    tracing::warn!(
        sample = %entry.sample_id,
        attempts = entry.attempts,
        "giving up: {}",
        entry.error.as_deref().unwrap_or("")
    );
    entry
}

/// Send every not-yet-logged sample to the endpoint and append one log entry
/// per outcome. Safe to interrupt and rerun: completed entries are kept and
/// their samples skipped.
pub async fn run_inference(
    samples: &[InstructionSample],
    cfg: &EndpointConfig,
    log_path: &Path,
    opts: &RunOptions,
) -> Result<RunSummary> {
    cfg.check()?;
    truncate_partial_tail(log_path)?;
    let done: HashSet<String> = read_log(log_path)?
        .into_iter()
        .filter(|e| !opts.retry_failed || e.status == EntryStatus::Ok)
        .map(|e| e.fingerprint)
        .collect();

    let fp_cfg = cfg.clone();
    let owned = samples.to_vec();
    let pending: Vec<InstructionSample> = tokio::task::spawn_blocking(move || {
        owned
            .into_iter()
            .filter(|s| !done.contains(&sample_fingerprint(s, &fp_cfg)))
            .collect()
    })
    .await
    .expect("fingerprinting task panicked");

    let mut summary = RunSummary {
        total: samples.len(),
        skipped: samples.len() - pending.len(),
        ..RunSummary::default()
    };
    if pending.is_empty() {
        tracing::info!(skipped = summary.skipped, "nothing to do, log is complete");
        return Ok(summary);
    }

    let client = build_client(cfg)?;
    preflight(&client, cfg).await?;
    let requests = Arc::new(AtomicU64::new(1));

    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(log_path)
        .map_err(|e| InferError::io(format!("opening {}", log_path.display()), e))?;
    let (tx, mut rx) = mpsc::channel::<ResponseLogEntry>(cfg.max_in_flight * 2);
    let log_display = log_path.display().to_string();
    let writer = tokio::task::spawn_blocking(move || -> Result<(usize, usize)> {
        let mut file = file;
        let (mut ok, mut failed) = (0, 0);
        while let Some(entry) = rx.blocking_recv() {
            let mut line = serde_json::to_string(&entry).expect("log entries serialize");
            line.push('\n');
            file.write_all(line.as_bytes())
                .and_then(|()| file.flush())
                .map_err(|e| InferError::io(format!("appending to {log_display}"), e))?;
            match entry.status {
                EntryStatus::Ok => ok += 1,
                EntryStatus::Failed => failed += 1,
            }
        }
        file.sync_data()
            .map_err(|e| InferError::io(format!("syncing {log_display}"), e))?;
        Ok((ok, failed))
    });

    let cfg = Arc::new(cfg.clone());
    let semaphore = Arc::new(Semaphore::new(cfg.max_in_flight));
    let mut tasks = JoinSet::new();
    let n_pending = pending.len();
    for sample in pending {
        let permit = Arc::clone(&semaphore)
            .acquire_owned()
            .await
            .expect("semaphore is never closed");
        let (client, cfg, tx, requests) = (
            client.clone(),
            Arc::clone(&cfg),
            tx.clone(),
            Arc::clone(&requests),
        );
        let digest = opts.config_digest.clone();
        tasks.spawn(async move {
            let entry = process(client, cfg, sample, requests, digest).await;
            drop(permit);
            // A closed channel means the writer failed; its error is reported below.
            let _ = tx.send(entry).await;
        });
        while let Some(res) = tasks.try_join_next() {
            res.expect("inference task panicked");
        }
    }
    drop(tx);
    while let Some(res) = tasks.join_next().await {
        res.expect("inference task panicked");
    }
    let (ok, failed) = writer.await.expect("log writer panicked")?;
    summary.succeeded = ok;
    summary.failed = failed;
    summary.http_requests = requests.load(Ordering::Relaxed);
    tracing::info!(
        requested = n_pending,
        succeeded = ok,
        failed,
        skipped = summary.skipped,
        "inference run finished"
    );
    Ok(summary)
}
