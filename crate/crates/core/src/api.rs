//! HTTP surface: the OTLP write path plus read-only query endpoints.
//!
//! | route                        | body                         |
//! |------------------------------|------------------------------|
//! | `POST /v1/traces`            | OTLP export request          |
//! | `GET /api/landscape?from&to` | landscape document           |
//! | `GET /api/layout?from&to`    | city scene                   |
//! | `GET /api/status`            | [`StatusReport`]             |
//!
//! `from` and `to` are unix milliseconds with `from < to`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use opentelemetry_proto::tonic::collector::trace::v1::{
    ExportTracePartialSuccess, ExportTraceServiceResponse,
};
use prost::Message;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;
use tower_http::cors::CorsLayer;

use crate::artificial::synthesize_landscape;
use crate::citylayout::layout;
use crate::config::Config;
use crate::ingest::otlp::Encoding;
use crate::ingest::{AcceptSummary, IngestBuffer, IngestCounters, IngestError};
use crate::landscape::Landscape;
use crate::pipeline::{ConsumerHandle, Pipeline};
use crate::store::{LoadReport, SnapshotStore, StoreError};

const NANOS_PER_MILLI: u64 = 1_000_000;
const MAX_BODY_BYTES: usize = 64 * 1024 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowRange {
    pub from_ms: u64,
    pub to_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusReport {
    pub counters: IngestCounters,
    pub pending_traces: usize,
    pub stored_windows: usize,
    pub uptime_seconds: u64,
    pub completed_traces: u64,
    pub pending_spans: usize,
    /// Accepted spans the consumer has taken out of the buffer.
    pub consumed_spans: u64,
    pub buffered_spans: usize,
    pub buffer_capacity: usize,
    /// Most recent stored window, for clients that follow live data.
    pub latest_window: Option<WindowRange>,
}

impl StatusReport {
    /// Every accepted span has been consumed and every trace completed, so
    /// queries reflect all data received so far.
    pub fn is_settled(&self) -> bool {
        self.consumed_spans == self.counters.accepted_spans && self.pending_traces == 0
    }
}

#[derive(Debug)]
pub struct AppState {
    pub pipeline: Arc<Pipeline>,
    pub jaccard_threshold: f64,
    started: Instant,
}

impl AppState {
    pub fn new(pipeline: Arc<Pipeline>, jaccard_threshold: f64) -> Self {
        AppState {
            pipeline,
            jaccard_threshold,
            started: Instant::now(),
        }
    }

    pub fn status(&self) -> StatusReport {
        let buffer = self.pipeline.buffer();
        let store = self.pipeline.store();
        let stats = self.pipeline.stats();
        StatusReport {
            counters: buffer.counters(),
            pending_traces: stats.pending_traces,
            stored_windows: store.window_count(),
            uptime_seconds: self.started.elapsed().as_secs(),
            completed_traces: stats.completed_traces,
            pending_spans: stats.pending_spans,
            consumed_spans: stats.consumed_spans,
            buffered_spans: buffer.len(),
            buffer_capacity: buffer.config().capacity_spans,
            latest_window: store.latest().map(|k| WindowRange {
                from_ms: k.start_unix_nano / NANOS_PER_MILLI,
                to_ms: k.end_unix_nano().div_ceil(NANOS_PER_MILLI),
            }),
        }
    }

    /// The landscape served for a nanosecond range, with synthetic structure
    /// for unresolved span names.
    pub fn landscape(&self, from: u64, to: u64) -> Result<Landscape, StoreError> {
        let raw = self.pipeline.store().query(from, to)?;
        Ok(synthesize_landscape(raw, self.jaccard_threshold))
    }
}

type Shared = Arc<AppState>;

/// Query routes plus the OTLP receiver.
pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/landscape", get(get_landscape))
        .route("/api/layout", get(get_layout))
        .route("/api/status", get(get_status))
        .merge(ingest_router(Arc::clone(&state)))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Only `POST /v1/traces`.
pub fn ingest_router<S>(state: Shared) -> Router<S> {
    Router::new()
        .route("/v1/traces", post(post_traces))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    let body = serde_json::json!({ "error": message.into() });
    (status, axum::Json(body)).into_response()
}

fn json_bytes<T: Serialize>(value: &T) -> Response {
    let body = serde_json::to_vec(value).expect("documents always serialize");
    ([(header::CONTENT_TYPE, "application/json")], body).into_response()
}

/// Parses `from` and `to` milliseconds into a nanosecond range.
pub fn parse_range(params: &HashMap<String, String>) -> Result<(u64, u64), String> {
    let field = |name: &str| -> Result<u64, String> {
        let raw = params.get(name).ok_or_else(|| format!("missing `{name}`"))?;
        let ms: u64 = raw
            .parse()
            .map_err(|_| format!("`{name}` must be an unsigned integer of milliseconds"))?;
        ms.checked_mul(NANOS_PER_MILLI)
            .ok_or_else(|| format!("`{name}` is out of range"))
    };
    let (from, to) = (field("from")?, field("to")?);
    if from >= to {
        return Err("`from` must be smaller than `to`".into());
    }
    Ok((from, to))
}

async fn get_landscape(State(state): State<Shared>, Query(params): Query<HashMap<String, String>>) -> Response {
    let (from, to) = match parse_range(&params) {
        Ok(r) => r,
        Err(msg) => return error(StatusCode::BAD_REQUEST, msg),
    };
    match state.landscape(from, to) {
        Ok(l) => json_bytes(&l),
        Err(e) => error(StatusCode::BAD_REQUEST, e.to_string()),
    }
}

async fn get_layout(State(state): State<Shared>, Query(params): Query<HashMap<String, String>>) -> Response {
    let (from, to) = match parse_range(&params) {
        Ok(r) => r,
        Err(msg) => return error(StatusCode::BAD_REQUEST, msg),
    };
    match state.landscape(from, to) {
        Ok(l) => json_bytes(&layout(&l)),
        Err(e) => error(StatusCode::BAD_REQUEST, e.to_string()),
    }
}

async fn get_status(State(state): State<Shared>) -> Response {
    json_bytes(&state.status())
}

async fn post_traces(State(state): State<Shared>, headers: HeaderMap, body: Bytes) -> Response {
    let encoding = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .and_then(Encoding::from_content_type);
    let Some(encoding) = encoding else {
        return error(
            StatusCode::UNSUPPORTED_MEDIA_TYPE,
            "expected application/x-protobuf or application/json",
        );
    };
    match state.pipeline.buffer().receive_export(&body, encoding) {
        Ok(summary) => export_response(summary, encoding),
        Err(IngestError::Decode(e)) => error(StatusCode::BAD_REQUEST, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// The standard export response; spans not accepted are reported as a
/// partial success.
pub fn export_response(summary: AcceptSummary, encoding: Encoding) -> Response {
    let not_accepted = summary.rejected + summary.dropped;
    let partial_success = (not_accepted > 0).then(|| ExportTracePartialSuccess {
        rejected_spans: not_accepted as i64,
        error_message: format!(
            "{} spans rejected as invalid, {} dropped because the buffer is full",
            summary.rejected, summary.dropped
        ),
    });
    let body = match encoding {
        Encoding::Protobuf => ExportTraceServiceResponse { partial_success }.encode_to_vec(),
        Encoding::Json => {
            let doc = match partial_success {
                Some(p) => serde_json::json!({
                    "partialSuccess": {
                        "rejectedSpans": p.rejected_spans.to_string(),
                        "errorMessage": p.error_message,
                    }
                }),
                None => serde_json::json!({}),
            };
            serde_json::to_vec(&doc).expect("json values serialize")
        }
    };
    ([(header::CONTENT_TYPE, encoding.content_type())], body).into_response()
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
}

/// Buffer, store and pipeline as described by `config`. Existing windows
/// in `store.dir` are loaded.
pub fn build_pipeline(config: &Config) -> Result<(Arc<Pipeline>, LoadReport), ServeError> {
    let buffer = Arc::new(IngestBuffer::new(config.buffer())?);
    let (store, report) = match &config.store.dir {
        Some(dir) if dir.is_dir() => SnapshotStore::load_all(dir, config.window_nano())?,
        dir => (
            SnapshotStore::new(config.window_nano(), dir.clone())?,
            LoadReport::default(),
        ),
    };
    let pipeline = Pipeline::new(
        buffer,
        Arc::new(store),
        config.assembly(),
        config.pipeline.drain_batch,
    );
    Ok((Arc::new(pipeline), report))
}

pub struct RunningServer {
    pub api_addr: SocketAddr,
    pub ingest_addr: SocketAddr,
    pub state: Shared,
    pub load_report: LoadReport,
    consumer: ConsumerHandle,
    stop: Vec<oneshot::Sender<()>>,
    tasks: Vec<JoinHandle<std::io::Result<()>>>,
}

impl RunningServer {
    pub fn pipeline(&self) -> &Arc<Pipeline> {
        &self.state.pipeline
    }

    /// Stops accepting requests, then drains and persists everything
    /// still in flight.
    pub async fn shutdown(self) -> Result<(), StoreError> {
        for tx in self.stop {
            let _ = tx.send(());
        }
        for task in self.tasks {
            if let Ok(Err(e)) = task.await {
                tracing::warn!(error = %e, "listener ended with an error");
            }
        }
        self.consumer.stop();
        let pipeline = Arc::clone(&self.state.pipeline);
        tokio::task::spawn_blocking(move || pipeline.settle())
            .await
            .expect("settle does not panic")
    }
}

async fn bind(host: [u8; 4], port: u16) -> Result<TcpListener, ServeError> {
    let addr = SocketAddr::from((host, port));
    TcpListener::bind(addr)
        .await
        .map_err(|source| ServeError::Bind { addr, source })
}

fn serve_on(listener: TcpListener, app: Router) -> (oneshot::Sender<()>, JoinHandle<std::io::Result<()>>) {
    let (tx, rx) = oneshot::channel::<()>();
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = rx.await;
            })
            .await
    });
    (tx, task)
}

/// Starts the consumer and the listeners on `host`. Port 0 picks a free port.
pub async fn start(config: &Config, host: [u8; 4]) -> Result<RunningServer, ServeError> {
    let (pipeline, load_report) = build_pipeline(config)?;
    let state = Arc::new(AppState::new(pipeline, config.clustering.jaccard_threshold));
    let consumer = state.pipeline.spawn(config.tick());

    let api_listener = bind(host, config.api.port).await?;
    let api_addr = api_listener.local_addr().map_err(|source| ServeError::Bind {
        addr: SocketAddr::from((host, config.api.port)),
        source,
    })?;
    let mut stop = Vec::new();
    let mut tasks = Vec::new();
    let (tx, task) = serve_on(api_listener, router(Arc::clone(&state)));
    stop.push(tx);
    tasks.push(task);

    let ingest_addr = if config.ingest.port == config.api.port {
        api_addr
    } else {
        let listener = bind(host, config.ingest.port).await?;
        let addr = listener.local_addr().map_err(|source| ServeError::Bind {
            addr: SocketAddr::from((host, config.ingest.port)),
            source,
        })?;
        let (tx, task) = serve_on(listener, ingest_router(Arc::clone(&state)));
        stop.push(tx);
        tasks.push(task);
        addr
    };
    tracing::info!(%api_addr, %ingest_addr, windows = load_report.loaded, "listening");
    Ok(RunningServer {
        api_addr,
        ingest_addr,
        state,
        load_report,
        consumer,
        stop,
        tasks,
    })
}
