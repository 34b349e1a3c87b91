//! JSON API over an [`Orchestrator`], plus a per-session event stream.
//!
//! | method | path                     | body              | reply                         |
//! |--------|--------------------------|-------------------|-------------------------------|
//! | POST   | `/sessions`              | `{config?, initial_state?, seed?}` | `{session_id}` |
//! | POST   | `/sessions/{id}/messages`| `{text}`          | `{kind, text?, tree?, domain}`|
//! | GET    | `/sessions/{id}/tree`    |                   | tree                          |
//! | POST   | `/sessions/{id}/marks`   | `{marks}`         | `{text}`                      |
//! | POST   | `/sessions/{id}/close`   |                   | report                        |
//! | GET    | `/sessions/{id}`         |                   | snapshot                      |
//! | GET    | `/sessions/{id}/events`  |                   | server-sent events, one log record each |

use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, Stream, StreamExt};
use lawluo_core::boss::ReportReview;
use lawluo_core::model::{AblationConfig, Clarification, DomainLabel, Phase, Session, Turn};
use lawluo_core::orchestrator::{LogRecord, MessageOutcome, Orchestrator};
use lawluo_core::secretary::ConsultationReport;
use lawluo_core::tolc::{Marks, TreeView};
use lawluo_core::Error;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;
use tokio_stream::wrappers::BroadcastStream;

pub const LISTEN_ENV: &str = "LAWLUO_LISTEN";
pub const DEFAULT_LISTEN: &str = "127.0.0.1:8750";
const FEED_CAPACITY: usize = 1024;

type Feed = broadcast::Sender<Arc<(String, LogRecord)>>;

#[derive(Clone)]
pub struct AppState {
    orch: Arc<Orchestrator>,
    feed: Feed,
}

impl AppState {
    /// Hooks the state's event feed into the orchestrator's store.
    pub fn new(orch: Arc<Orchestrator>) -> Self {
        let (feed, _) = broadcast::channel(FEED_CAPACITY);
        let tx = feed.clone();
        orch.store().subscribe(Arc::new(move |u| {
            let _ = tx.send(Arc::new((u.session_id.to_string(), u.record.clone())));
        }));
        AppState { orch, feed }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(snapshot))
        .route("/sessions/{id}/messages", post(message))
        .route("/sessions/{id}/tree", get(tree))
        .route("/sessions/{id}/marks", post(marks))
        .route("/sessions/{id}/close", post(close))
        .route("/sessions/{id}/events", get(events))
        .with_state(state)
}

/// Serves until interrupted.
pub async fn serve(listen: SocketAddr, orch: Arc<Orchestrator>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(listen).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(AppState::new(orch)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

fn status_of(e: &Error) -> (StatusCode, &'static str) {
    match e {
        Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
        Error::Phase { .. } => (StatusCode::CONFLICT, "phase"),
        Error::Usage(_) | Error::Config(_) | Error::Shape(_) => (StatusCode::BAD_REQUEST, "usage"),
        Error::BackendUnavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "backend_unavailable"),
        Error::Protocol(_) | Error::Generation { .. } | Error::ReportFormat { .. } | Error::Judge { .. } => {
            (StatusCode::BAD_GATEWAY, "backend_output")
        }
        _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = status_of(&self.0);
        if status.is_server_error() {
            tracing::error!(error = %self.0, "request failed");
        }
        let mut body = serde_json::json!({"error": kind, "message": self.0.to_string()});
        if let Error::Phase { phase, .. } = &self.0 {
            body["phase"] = serde_json::to_value(phase).unwrap_or_default();
        }
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

/// Runs blocking orchestrator work off the async executor.
async fn blocking<T: Send + 'static>(
    state: &AppState,
    f: impl FnOnce(&Orchestrator) -> lawluo_core::Result<T> + Send + 'static,
) -> std::result::Result<T, ApiError> {
    let orch = state.orch.clone();
    tokio::task::spawn_blocking(move || f(&orch))
        .await
        .map_err(|e| ApiError(Error::Usage(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    #[serde(default)]
    pub config: AblationConfig,
    #[serde(default)]
    pub initial_state: String,
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub session_id: String,
}

async fn create_session(State(state): State<AppState>, body: Option<Json<CreateRequest>>) -> Response {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    let seed = req.seed.unwrap_or_else(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_nanos() as u64)
    });
    match blocking(&state, move |o| o.create_session(req.config, &req.initial_state, seed)).await {
        Ok(s) => (
            StatusCode::CREATED,
            Json(Created {
                session_id: s.id().to_string(),
            }),
        )
            .into_response(),
        Err(e) => e.into_response(),
    }
}

#[derive(Debug, Deserialize)]
pub struct MessageRequest {
    pub text: String,
}

async fn message(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<MessageRequest>,
) -> ApiResult<MessageOutcome> {
    blocking(&state, move |o| o.handle_user_message(&id, &req.text))
        .await
        .map(Json)
}

async fn tree(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<TreeView> {
    blocking(&state, move |o| o.tree(&id)).await.map(Json)
}

#[derive(Debug, Deserialize)]
pub struct MarksRequest {
    #[serde(default)]
    pub marks: Marks,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Reply {
    pub text: String,
}

async fn marks(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<MarksRequest>,
) -> ApiResult<Reply> {
    blocking(&state, move |o| o.submit_marks(&id, &req.marks))
        .await
        .map(|text| Json(Reply { text }))
}

async fn close(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<ConsultationReport> {
    blocking(&state, move |o| o.close_session(&id)).await.map(Json)
}

/// Session state as shown to clients.
#[derive(Debug, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub session_id: String,
    /// Sequence number of the last event reflected here.
    pub seq: u64,
    pub phase: Phase,
    pub domain: Option<DomainLabel>,
    pub config: AblationConfig,
    pub transcript: Vec<Turn>,
    pub tree: Option<TreeView>,
    pub clarifications: Vec<Clarification>,
    pub report: Option<ConsultationReport>,
    /// Plain-text rendering of `report`.
    pub report_text: Option<String>,
    pub review: Option<ReportReview>,
}

impl SessionSnapshot {
    pub fn new(s: &Session, seq: u64) -> Self {
        SessionSnapshot {
            session_id: s.id().to_string(),
            seq,
            phase: s.phase(),
            domain: s.domain().cloned(),
            config: s.config().clone(),
            transcript: s.transcript().to_vec(),
            tree: s.pending_tree().map(|t| t.view()),
            clarifications: s.clarifications().to_vec(),
            report: s.report().cloned(),
            report_text: s.report().map(ConsultationReport::render),
            review: s.review().cloned(),
        }
    }
}

async fn snapshot(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<SessionSnapshot> {
    blocking(&state, move |o| {
        let (s, seq) = o.store().snapshot(&id)?;
        Ok(SessionSnapshot::new(&s, seq))
    })
    .await
    .map(Json)
}

#[derive(Debug, Default, Deserialize)]
pub struct EventsQuery {
    /// Only records with a larger `seq` are sent.
    pub after: Option<u64>,
}

fn sse_event(r: &LogRecord) -> Event {
    Event::default()
        .id(r.seq.to_string())
        .event(r.event_type.clone())
        .data(serde_json::to_string(r).unwrap_or_default())
}

/// Past records after the cursor, then live ones. A consumer that falls too
/// far behind has its stream ended and should resync from the snapshot.
async fn events(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> std::result::Result<Sse<impl Stream<Item = std::result::Result<Event, Infallible>>>, ApiError> {
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.parse::<u64>().ok());
    let after = q.after.or(resume).unwrap_or(0);
    // Subscribe before reading the log so nothing falls between the two.
    let live = BroadcastStream::new(state.feed.subscribe());
    let past = {
        let id = id.clone();
        blocking(&state, move |o| o.events(&id)).await?
    };
    let last_past = past.last().map_or(0, |r| r.seq).max(after);
    let backlog: Vec<_> = past.into_iter().filter(|r| r.seq > after).map(|r| Ok(sse_event(&r))).collect();
    let live = live
        .take_while(|item| futures::future::ready(item.is_ok()))
        .filter_map(move |item| {
            let out = match item {
                Ok(pair) if pair.0 == id && pair.1.seq > last_past => Some(Ok(sse_event(&pair.1))),
                _ => None,
            };
            futures::future::ready(out)
        });
    Ok(Sse::new(stream::iter(backlog).chain(live)).keep_alive(KeepAlive::default()))
}
