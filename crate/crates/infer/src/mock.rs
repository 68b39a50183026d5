//! In-process OpenAI-compatible endpoint for tests.
//!
//! The server answers `GET /v1/models` and `POST /v1/chat/completions`,
//! delegating the latter to a caller-supplied responder, and records how many
//! requests and TCP connections it saw at once.

use std::io;
use std::net::SocketAddr;
use std::pin::Pin;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::task::{Context, Poll};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::{json, Value};
use tokio::io::{AsyncRead, AsyncWrite, ReadBuf};
use tokio::net::{TcpListener, TcpStream};

/// What the mock answers to one chat request.
#[derive(Debug, Clone)]
pub struct MockReply {
    pub status: u16,
    pub body: Value,
    pub delay: Duration,
}

impl MockReply {
    /// A successful completion whose message content is `text`.
    pub fn text(text: impl Into<String>) -> Self {
        MockReply {
            status: 200,
            body: json!({
                "id": "mock",
                "object": "chat.completion",
                "choices": [{
                    "index": 0,
                    "message": {"role": "assistant", "content": text.into()},
                    "finish_reason": "stop",
                }],
            }),
            delay: Duration::ZERO,
        }
    }

    pub fn error(status: u16) -> Self {
        MockReply {
            status,
            body: json!({"error": {"message": format!("mock status {status}")}}),
            delay: Duration::ZERO,
        }
    }

    pub fn delayed(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }
}

#[derive(Debug, Default)]
pub struct MockStats {
    pub model_requests: AtomicU64,
    pub chat_requests: AtomicU64,
    pub in_flight: AtomicUsize,
    pub max_in_flight: AtomicUsize,
    pub open_connections: AtomicUsize,
    pub max_open_connections: AtomicUsize,
}

impl MockStats {
    pub fn chat_requests(&self) -> u64 {
        self.chat_requests.load(Ordering::SeqCst)
    }

    pub fn total_requests(&self) -> u64 {
        self.chat_requests() + self.model_requests.load(Ordering::SeqCst)
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight.load(Ordering::SeqCst)
    }

    pub fn max_open_connections(&self) -> usize {
        self.max_open_connections.load(Ordering::SeqCst)
    }
}

fn bump(current: &AtomicUsize, max: &AtomicUsize) {
    let now = current.fetch_add(1, Ordering::SeqCst) + 1;
    max.fetch_max(now, Ordering::SeqCst);
}

type Responder = dyn Fn(&Value) -> MockReply + Send + Sync;

#[derive(Clone)]
struct AppState {
    responder: Arc<Responder>,
    stats: Arc<MockStats>,
}

pub struct MockServer {
    pub addr: SocketAddr,
    pub stats: Arc<MockStats>,
    task: tokio::task::JoinHandle<()>,
}

impl MockServer {
    /// Bind to an ephemeral localhost port and serve until dropped.
    pub async fn start<F>(responder: F) -> io::Result<Self>
    where
        F: Fn(&Value) -> MockReply + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").await?;
        let addr = listener.local_addr()?;
        let stats = Arc::new(MockStats::default());
        let state = AppState {
            responder: Arc::new(responder),
            stats: Arc::clone(&stats),
        };
        let app = Router::new()
            .route("/v1/models", get(models))
            .route("/v1/chat/completions", post(chat))
            .with_state(state);
        let counted = CountingListener {
            inner: listener,
            stats: Arc::clone(&stats),
        };
        let task = tokio::spawn(async move {
            let _ = axum::serve(counted, app).await;
        });
        Ok(MockServer { addr, stats, task })
    }

    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

async fn models(State(st): State<AppState>) -> Json<Value> {
    st.stats.model_requests.fetch_add(1, Ordering::SeqCst);
    Json(json!({"object": "list", "data": [{"id": "mock", "object": "model"}]}))
}

async fn chat(State(st): State<AppState>, Json(body): Json<Value>) -> Response {
    st.stats.chat_requests.fetch_add(1, Ordering::SeqCst);
    bump(&st.stats.in_flight, &st.stats.max_in_flight);
    let reply = (st.responder)(&body);
    if !reply.delay.is_zero() {
        tokio::time::sleep(reply.delay).await;
    }
    st.stats.in_flight.fetch_sub(1, Ordering::SeqCst);
    let status = StatusCode::from_u16(reply.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
    (status, Json(reply.body)).into_response()
}

/// `(instruction text, image data URI)` of a chat request built by
/// [`crate::encode_request`].
pub fn request_parts(body: &Value) -> Option<(String, String)> {
    let parts = body.pointer("/messages/0/content")?.as_array()?;
    let text = parts
        .iter()
        .find_map(|p| p.get("text").and_then(Value::as_str))?;
    let image = parts
        .iter()
        .find_map(|p| p.pointer("/image_url/url").and_then(Value::as_str))?;
    Some((text.to_string(), image.to_string()))
}

struct CountingListener {
    inner: TcpListener,
    stats: Arc<MockStats>,
}

impl axum::serve::Listener for CountingListener {
    type Io = CountedStream;
    type Addr = SocketAddr;

    async fn accept(&mut self) -> (Self::Io, Self::Addr) {
        loop {
            match self.inner.accept().await {
                Ok((stream, addr)) => {
                    bump(
                        &self.stats.open_connections,
                        &self.stats.max_open_connections,
                    );
                    let stream = CountedStream {
                        inner: stream,
                        stats: Arc::clone(&self.stats),
                    };
                    return (stream, addr);
                }
                Err(_) => tokio::time::sleep(Duration::from_millis(5)).await,
            }
        }
    }

    fn local_addr(&self) -> io::Result<Self::Addr> {
        self.inner.local_addr()
    }
}

struct CountedStream {
    inner: TcpStream,
    stats: Arc<MockStats>,
}

impl Drop for CountedStream {
    fn drop(&mut self) {
        self.stats.open_connections.fetch_sub(1, Ordering::SeqCst);
    }
}

impl AsyncRead for CountedStream {
    fn poll_read(
        mut self: Pin<&mut Self>,
        cx: &mut Context<'_>,
        buf: &mut ReadBuf<'_>,
    ) -> Poll<io::Result<()>> {
        Pin::new(&mut self.inner).poll_read(cx, buf)
    }
}

impl AsyncWrite for CountedStream {
    fn poll_write(
        mut self: Pin<&mut Self>,
        cx: &mut Context<'_>,
        buf: &[u8],
    ) -> Poll<io::Result<usize>> {
        Pin::new(&mut self.inner).poll_write(cx, buf)
    }

    fn poll_flush(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<io::Result<()>> {
        Pin::new(&mut self.inner).poll_flush(cx)
    }

    fn poll_shutdown(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<io::Result<()>> {
        Pin::new(&mut self.inner).poll_shutdown(cx)
    }
}
