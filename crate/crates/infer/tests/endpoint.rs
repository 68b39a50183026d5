use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use medbench_core::dataset::{build_samples, InstructionSample};
use medbench_core::model::{AnnotationSet, BBox, ImageRecord, SourceKind};
use medbench_core::prompt::QuestionBank;
use medbench_infer::mock::{request_parts, MockReply, MockServer};
use medbench_infer::{
    encode_request, read_log, replay_log, run_inference, EndpointConfig, EntryStatus, InferError,
    RunOptions,
};

fn samples(dir: &Path, n_images: usize) -> Vec<InstructionSample> {
    let bank = QuestionBank::default();
    let mut out = Vec::new();
    for i in 0..n_images {
        let path = dir.join(format!("img{i}.png"));
        image::RgbImage::from_pixel(8, 6, image::Rgb([i as u8, 7, 9]))
            .save(&path)
            .unwrap();
        let rec = ImageRecord::new(
            format!("polyp/img{i}.png"),
            SourceKind::Polyp,
            8,
            6,
            path.to_string_lossy(),
        )
        .unwrap();
        let boxes = (0..i % 3)
            .map(|k| BBox::new(k as f64, 0.0, k as f64 + 2.0, 3.0))
            .collect();
        out.extend(
            build_samples(&rec, &AnnotationSet::with_boxes("polyp", boxes), &bank, 7).unwrap(),
        );
    }
    out
}

fn config(server: &MockServer) -> EndpointConfig {
    EndpointConfig {
        base_url: server.base_url(),
        model: "mock".into(),
        timeout_secs: 10.0,
        backoff_base_secs: 0.001,
        ..EndpointConfig::default()
    }
}

/// Map from request content to the canonical target of its sample.
fn targets(
    samples: &[InstructionSample],
    cfg: &EndpointConfig,
) -> HashMap<(String, String), String> {
    samples
        .iter()
        .map(|s| {
            let body = encode_request(s, cfg).body.unwrap();
            (request_parts(&body).unwrap(), s.target.clone())
        })
        .collect()
}

async fn echo_server(samples: &[InstructionSample], delay: Duration) -> MockServer {
    let probe = EndpointConfig {
        model: "mock".into(),
        ..EndpointConfig::default()
    };
    let map = targets(samples, &probe);
    MockServer::start(move |body| {
        let key = request_parts(body).unwrap();
        MockReply::text(map[&key].clone()).delayed(delay)
    })
    .await
    .unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn echo_run_logs_one_success_per_sample_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let s = samples(dir.path(), 6);
    let server = echo_server(&s, Duration::ZERO).await;
    let cfg = config(&server);
    let log = dir.path().join("log.jsonl");
    let summary = run_inference(&s, &cfg, &log, &RunOptions::default())
        .await
        .unwrap();
    assert_eq!(
        (summary.succeeded, summary.failed, summary.skipped),
        (s.len(), 0, 0)
    );

    let entries = read_log(&log).unwrap();
    assert_eq!(entries.len(), s.len());
    assert!(entries
        .iter()
        .all(|e| e.status == EntryStatus::Ok && e.attempts == 1));

    let replayed: HashMap<String, String> = replay_log(&log, &s).unwrap().into_iter().collect();
    for sample in &s {
        assert_eq!(replayed[&sample.sample_id], sample.target);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn transient_failures_are_retried() {
    let dir = tempfile::tempdir().unwrap();
    let s: Vec<_> = samples(dir.path(), 1).into_iter().take(1).collect();
    let seen = Arc::new(Mutex::new(0u32));
    let counter = Arc::clone(&seen);
    let server = MockServer::start(move |_| {
        let mut n = counter.lock().unwrap();
        *n += 1;
        match *n {
            1 => MockReply::error(503),
            2 => MockReply::error(429),
            _ => MockReply::text("{\"counts\": 0, \"label\": \"polyp\"}"),
        }
    })
    .await
    .unwrap();
    let cfg = EndpointConfig {
        max_retries: 3,
        ..config(&server)
    };
    let log = dir.path().join("log.jsonl");
    run_inference(&s, &cfg, &log, &RunOptions::default())
        .await
        .unwrap();
    let entries = read_log(&log).unwrap();
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0].status, EntryStatus::Ok);
    assert_eq!(entries[0].attempts, 3);
    assert_eq!(entries[0].http_status, Some(200));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn exhausted_and_fatal_errors_are_logged_as_failures() {
    let dir = tempfile::tempdir().unwrap();
    let s: Vec<_> = samples(dir.path(), 1).into_iter().take(2).collect();
    let first = s[0].instruction.clone();
    let server = MockServer::start(move |body| {
        let (text, _) = request_parts(body).unwrap();
        if text == first {
            MockReply::error(500)
        } else {
            MockReply::error(400)
        }
    })
    .await
    .unwrap();
    let cfg = EndpointConfig {
        max_retries: 2,
        ..config(&server)
    };
    let log = dir.path().join("log.jsonl");
    let summary = run_inference(&s, &cfg, &log, &RunOptions::default())
        .await
        .unwrap();
    assert_eq!(summary.failed, 2);
    let entries: HashMap<_, _> = read_log(&log)
        .unwrap()
        .into_iter()
        .map(|e| (e.sample_id.clone(), e))
        .collect();
    assert_eq!(entries[&s[0].sample_id].attempts, 3);
    assert_eq!(entries[&s[1].sample_id].attempts, 1);
    assert_eq!(server.stats.chat_requests(), 4);

    // Failed entries replay as empty text.
    let replayed = replay_log(&log, &s).unwrap();
    assert!(replayed.iter().all(|(_, text)| text.is_empty()));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrency_never_exceeds_the_bound() {
    let dir = tempfile::tempdir().unwrap();
    let s: Vec<_> = samples(dir.path(), 60).into_iter().take(100).collect();
    let server = echo_server(&s, Duration::from_millis(15)).await;
    let cfg = EndpointConfig {
        max_in_flight: 4,
        ..config(&server)
    };
    let log = dir.path().join("log.jsonl");
    run_inference(&s, &cfg, &log, &RunOptions::default())
        .await
        .unwrap();
    assert!(
        server.stats.max_in_flight() <= 4,
        "{}",
        server.stats.max_in_flight()
    );
    assert!(
        server.stats.max_open_connections() <= 4,
        "{}",
        server.stats.max_open_connections()
    );
    assert!(
        server.stats.max_in_flight() >= 2,
        "the pool should actually run in parallel"
    );
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn interrupted_run_resumes_with_exactly_the_missing_requests() {
    let dir = tempfile::tempdir().unwrap();
    let s = samples(dir.path(), 20);
    let server = echo_server(&s, Duration::from_millis(10)).await;
    let cfg = EndpointConfig {
        max_in_flight: 2,
        ..config(&server)
    };
    let log = dir.path().join("log.jsonl");

    // Interrupt the run once a handful of entries have been written.
    let watch = async {
        loop {
            tokio::time::sleep(Duration::from_millis(5)).await;
            if read_log(&log).map_or(0, |e| e.len()) >= 5 {
                break;
            }
        }
    };
    let opts = RunOptions::default();
    tokio::select! {
        r = run_inference(&s, &cfg, &log, &opts) => panic!("run finished early: {r:?}"),
        () = watch => {}
    }
    tokio::time::sleep(Duration::from_millis(50)).await;
    let logged = read_log(&log).unwrap().len();
    assert!(
        logged > 0 && logged < s.len(),
        "logged {logged} of {}",
        s.len()
    );

    let before = server.stats.chat_requests();
    let summary = run_inference(&s, &cfg, &log, &RunOptions::default())
        .await
        .unwrap();
    assert_eq!(summary.skipped, logged);
    assert_eq!(
        server.stats.chat_requests() - before,
        (s.len() - logged) as u64
    );
    assert_eq!(read_log(&log).unwrap().len(), s.len());

    // A complete log means no HTTP traffic at all, not even the preflight.
    let total = server.stats.total_requests();
    let summary = run_inference(&s, &cfg, &log, &RunOptions::default())
        .await
        .unwrap();
    assert_eq!(summary.skipped, s.len());
    assert_eq!(server.stats.total_requests(), total);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn replay_rejects_changed_samples() {
    let dir = tempfile::tempdir().unwrap();
    let s = samples(dir.path(), 2);
    let server = echo_server(&s, Duration::ZERO).await;
    let cfg = config(&server);
    let log = dir.path().join("log.jsonl");
    run_inference(&s, &cfg, &log, &RunOptions::default())
        .await
        .unwrap();

    let mut tampered = s.clone();
    tampered[0].instruction.push_str(" Please.");
    match replay_log(&log, &tampered) {
        Err(InferError::LogMismatch { changed, missing }) => {
            assert_eq!(changed, vec![s[0].sample_id.clone()]);
            assert!(missing.is_empty());
        }
        other => panic!("expected mismatch, got {other:?}"),
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn unreadable_image_fails_without_http() {
    let dir = tempfile::tempdir().unwrap();
    let mut s: Vec<_> = samples(dir.path(), 1).into_iter().take(1).collect();
    s[0].image.uri = dir
        .path()
        .join("missing.png")
        .to_string_lossy()
        .into_owned();
    let server = MockServer::start(|_| MockReply::text("{}")).await.unwrap();
    let log = dir.path().join("log.jsonl");
    let summary = run_inference(&s, &config(&server), &log, &RunOptions::default())
        .await
        .unwrap();
    assert_eq!(summary.failed, 1);
    assert_eq!(server.stats.chat_requests(), 0);
    assert_eq!(read_log(&log).unwrap()[0].attempts, 0);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn unreachable_endpoint_fails_preflight() {
    let dir = tempfile::tempdir().unwrap();
    let s = samples(dir.path(), 1);
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let cfg = EndpointConfig {
        base_url: format!("http://127.0.0.1:{port}/v1"),
        timeout_secs: 2.0,
        ..EndpointConfig::default()
    };
    let err = run_inference(
        &s,
        &cfg,
        &dir.path().join("log.jsonl"),
        &RunOptions::default(),
    )
    .await
    .unwrap_err();
    assert!(matches!(err, InferError::Preflight(_)), "{err}");
}
