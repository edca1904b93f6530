//! Session service for streaming adaptation over HTTP.
//!
//! | Method | Path                          | Body / result                                   |
//! |--------|-------------------------------|-------------------------------------------------|
//! | POST   | `/api/sessions`               | [`CreateSession`] → `{session_id, categories, config}` |
//! | GET    | `/api/sessions/{id}/frame`    | [`FrameResponse`] or `{status: "end_of_stream"}` |
//! | POST   | `/api/sessions/{id}/label`    | [`LabelRequest`] → [`LabelResponse`]             |
//! | GET    | `/api/sessions/{id}/metrics`  | [`Metrics`]                                     |
//! | GET    | `/api/sessions/{id}/events`   | `text/event-stream` of [`EventRecord`]          |
//! | GET    | `/api/health`                 | `{status: "ok"}`                                |
//!
//! Errors are `{error, message}` with 404 (unknown session or frame), 409
//! (out-of-order or repeated call), 422 (invalid config or category name).

use std::collections::HashMap;
use std::convert::Infallible;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, KeepAliveStream, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use futures::{Stream, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc;

use wstta_core::adaptation::Method;
use wstta_core::detector::{Detection, DetectorModel};
use wstta_core::scene::png_bytes;
use wstta_core::session::{EvalRecord, Session, SessionConfig, SessionEvent, StepRecord};
use wstta_core::Error as CoreError;

/// Checkpoint cadence in steps (plus one at session end).
pub const CHECKPOINT_EVERY: usize = 50;

#[derive(Clone, Debug)]
pub struct ServerConfig {
    /// Checkpoint loaded by sessions that do not name one.
    pub model: Option<PathBuf>,
    /// Defaults for every new session; request fields override them.
    pub base: SessionConfig,
    /// Event logs (`<id>.ndjson`) and checkpoints are written here.
    pub data_dir: PathBuf,
}

/// Event envelope as logged and pushed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u64,
    /// Milliseconds since the Unix epoch.
    pub timestamp_ms: u64,
    pub session_id: String,
    #[serde(flatten)]
    pub event: SessionEvent,
}

/// Append-only event list with per-subscriber delivery queues. Subscribing
/// and publishing share one lock, so every subscriber sees every record
/// exactly once and in order.
#[derive(Default)]
struct EventHub {
    inner: Mutex<HubInner>,
}

#[derive(Default)]
struct HubInner {
    log: Vec<EventRecord>,
    subscribers: Vec<mpsc::UnboundedSender<EventRecord>>,
}

impl EventHub {
    fn publish(&self, rec: EventRecord) {
        let mut g = self.inner.lock().expect("hub lock");
        g.subscribers.retain(|s| s.send(rec.clone()).is_ok());
        g.log.push(rec);
    }

    fn subscribe(&self) -> (Vec<EventRecord>, mpsc::UnboundedReceiver<EventRecord>) {
        let (tx, rx) = mpsc::unbounded_channel();
        let mut g = self.inner.lock().expect("hub lock");
        g.subscribers.push(tx);
        (g.log.clone(), rx)
    }

    fn snapshot(&self) -> Vec<EventRecord> {
        self.inner.lock().expect("hub lock").log.clone()
    }

    fn len(&self) -> usize {
        self.inner.lock().expect("hub lock").log.len()
    }
}

/// Scalar history of a session, replaced wholesale at step boundaries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub session_id: String,
    pub steps: usize,
    pub budget: usize,
    pub momentum: f64,
    pub finished: bool,
    pub awaiting_label: Option<u64>,
    pub history: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

struct SessionHandle {
    id: String,
    session: Mutex<Session>,
    hub: EventHub,
    metrics: RwLock<Arc<Metrics>>,
    log: Mutex<File>,
    data_dir: PathBuf,
}

impl SessionHandle {
    /// Publishes events the session emitted since the last call.
    fn flush_events(&self, session: &Session) -> Result<(), ApiError> {
        let known = self.hub.len();
        let mut log = self.log.lock().expect("log lock");
        for (i, e) in session.events().iter().enumerate().skip(known) {
            let rec = EventRecord {
                seq: i as u64,
                timestamp_ms: now_ms(),
                session_id: self.id.clone(),
                event: e.clone(),
            };
            serde_json::to_writer(&mut *log, &rec).map_err(|e| ApiError::internal(e.to_string()))?;
            log.write_all(b"\n")
                .and_then(|_| log.flush())
                .map_err(|e| ApiError::internal(e.to_string()))?;
            self.hub.publish(rec);
        }
        Ok(())
    }

    fn refresh_metrics(&self, session: &Session) {
        let mut history = Vec::new();
        let mut evals = Vec::new();
        for e in session.events() {
            match e {
                SessionEvent::StepCompleted(s) => history.push(s.clone()),
                SessionEvent::EvalCompleted(r) => evals.push(r.clone()),
                _ => {}
            }
        }
        let m = Metrics {
            session_id: self.id.clone(),
            steps: session.steps(),
            budget: session.config().budget,
            momentum: session.momentum(),
            finished: session.is_finished(),
            awaiting_label: session.awaiting_label(),
            history,
            evals,
        };
        *self.metrics.write().expect("metrics lock") = Arc::new(m);
    }

    fn checkpoint(&self, session: &Session) -> Result<(), ApiError> {
        let t = session.steps();
        if t % CHECKPOINT_EVERY == 0 || session.is_finished() {
            let path = self.data_dir.join(format!("{}-step{t:04}.ckpt", self.id));
            session
                .model()
                .save(&path)
                .map_err(|e| ApiError::internal(e.to_string()))?;
        }
        Ok(())
    }
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub struct AppState {
    config: ServerConfig,
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
}

impl AppState {
    pub fn new(config: ServerConfig) -> std::io::Result<Arc<Self>> {
        std::fs::create_dir_all(&config.data_dir)?;
        Ok(Arc::new(Self {
            config,
            sessions: RwLock::new(HashMap::new()),
        }))
    }

    fn get(&self, id: &str) -> Result<Arc<SessionHandle>, ApiError> {
        self.sessions
            .read()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session {id:?}")))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn internal(message: String) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::Conflict(_) => Self::new(StatusCode::CONFLICT, "conflict", msg),
            CoreError::NotFound(_) => Self::new(StatusCode::NOT_FOUND, "unknown_frame", msg),
            CoreError::UnknownCategory(_) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "unknown_category", msg)
            }
            CoreError::Usage(_) | CoreError::Json(_) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", msg)
            }
            CoreError::Parse { .. } | CoreError::Io(_) => {
                Self::new(StatusCode::UNPROCESSABLE_ENTITY, "bad_checkpoint", msg)
            }
            _ => Self::internal(msg),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({ "error": self.code, "message": self.message });
        (self.status, Json(body)).into_response()
    }
}

/// Body of `POST /api/sessions`. Missing fields take the server defaults.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    /// Checkpoint path; defaults to the server's model.
    pub model: Option<PathBuf>,
    pub method: Option<String>,
    pub omega: Option<f64>,
    pub delta: Option<f64>,
    pub lambda: Option<f64>,
    pub alpha: Option<f64>,
    pub tau: Option<f64>,
    pub budget: Option<usize>,
    pub seed: Option<u64>,
    pub order_seed: Option<u64>,
    pub noise: Option<f64>,
    pub auto_oracle: Option<bool>,
    pub eval_every: Option<usize>,
    pub test_frames: Option<usize>,
}

impl CreateSession {
    pub fn apply(&self, base: &SessionConfig) -> Result<SessionConfig, CoreError> {
        let mut c = base.clone();
        if let Some(m) = &self.method {
            c.adaptation.method = Method::parse(m)?;
        }
        let a = &mut c.adaptation;
        for (dst, src) in [
            (&mut a.omega, self.omega),
            (&mut a.delta, self.delta),
            (&mut a.lambda, self.lambda),
            (&mut a.alpha, self.alpha),
            (&mut a.tau, self.tau),
        ] {
            if let Some(v) = src {
                *dst = v;
            }
        }
        c.budget = self.budget.unwrap_or(c.budget);
        c.seed = self.seed.unwrap_or(c.seed);
        c.order_seed = self.order_seed.or(c.order_seed);
        c.noise = self.noise.unwrap_or(c.noise);
        c.auto_oracle = self.auto_oracle.unwrap_or(c.auto_oracle);
        c.eval_every = self.eval_every.unwrap_or(c.eval_every);
        c.test_frames = self.test_frames.unwrap_or(c.test_frames);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CreateResponse {
    pub session_id: String,
    pub categories: Vec<String>,
    pub config: SessionConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WireDetection {
    /// `[x1, y1, x2, y2]` in pixels.
    pub bbox: [f64; 4],
    pub category: String,
    pub score: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameResponse {
    pub status: String,
    pub t: usize,
    pub frame_id: u64,
    pub width: usize,
    pub height: usize,
    /// PNG, base64 (standard alphabet).
    pub image_png: String,
    pub prediction: Vec<WireDetection>,
    pub categories: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelRequest {
    pub frame_id: u64,
    /// Category names present in the frame. `null` asks the oracle
    /// (auto-oracle sessions only).
    pub categories: Option<Vec<String>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelResponse {
    pub step: StepRecord,
    /// Evaluations that ran after this step.
    pub evals: Vec<EvalRecord>,
    pub finished: bool,
}

#[derive(Deserialize)]
struct EventsQuery {
    /// `false` returns the records so far and closes the stream.
    follow: Option<bool>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}/frame", get(next_frame))
        .route("/api/sessions/{id}/label", post(submit_label))
        .route("/api/sessions/{id}/metrics", get(metrics))
        .route("/api/sessions/{id}/events", get(events))
        .with_state(state)
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(config: ServerConfig, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    serve_listener(config, listener).await
}

pub async fn serve_listener(config: ServerConfig, listener: tokio::net::TcpListener) -> std::io::Result<()> {
    let state = AppState::new(config)?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

fn new_session_id() -> String {
    format!("{:016x}", rand::random::<u64>())
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: axum::body::Bytes,
) -> Result<(StatusCode, Json<CreateResponse>), ApiError> {
    let req: CreateSession = if body.is_empty() {
        CreateSession::default()
    } else {
        serde_json::from_slice(&body)
            .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", e.to_string()))?
    };
    let config = req.apply(&state.config.base)?;
    let path = req
        .model
        .clone()
        .or_else(|| state.config.model.clone())
        .ok_or_else(|| {
            ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "bad_checkpoint",
                "no model given and the server has no default",
            )
        })?;
    let data_dir = state.config.data_dir.clone();
    let handle = tokio::task::spawn_blocking(move || -> Result<Arc<SessionHandle>, ApiError> {
        let model = DetectorModel::load(&path)?;
        let session = Session::new(model, config)?;
        let id = new_session_id();
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(data_dir.join(format!("{id}.ndjson")))
            .map_err(|e| ApiError::internal(e.to_string()))?;
        let handle = Arc::new(SessionHandle {
            id,
            session: Mutex::new(session),
            hub: EventHub::default(),
            metrics: RwLock::new(Arc::new(Metrics::default())),
            log: Mutex::new(log),
            data_dir,
        });
        {
            let s = handle.session.lock().expect("session lock");
            handle.flush_events(&s)?;
            handle.refresh_metrics(&s);
        }
        Ok(handle)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    let resp = {
        let s = handle.session.lock().expect("session lock");
        CreateResponse {
            session_id: handle.id.clone(),
            categories: s.model().categories.clone(),
            config: s.config().clone(),
        }
    };
    state
        .sessions
        .write()
        .expect("sessions lock")
        .insert(handle.id.clone(), handle);
    Ok((StatusCode::CREATED, Json(resp)))
}

fn wire(d: &Detection, categories: &[String]) -> WireDetection {
    WireDetection {
        bbox: d.bbox.to_array(),
        category: categories[d.category].clone(),
        score: d.score,
    }
}

async fn next_frame(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let handle = state.get(&id)?;
    tokio::task::spawn_blocking(move || -> Result<Response, ApiError> {
        // try_lock: a label being processed means this fetch is out of order
        let mut s = match handle.session.try_lock() {
            Ok(s) => s,
            Err(std::sync::TryLockError::WouldBlock) => {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    "conflict",
                    "a label is being processed",
                ))
            }
            Err(std::sync::TryLockError::Poisoned(_)) => {
                return Err(ApiError::internal("session state poisoned".into()))
            }
        };
        let served = match s.next_frame() {
            Ok(f) => f,
            Err(CoreError::EndOfStream(budget)) => {
                let body = serde_json::json!({ "status": "end_of_stream", "budget": budget });
                return Ok(Json(body).into_response());
            }
            Err(e) => return Err(e.into()),
        };
        handle.flush_events(&s)?;
        handle.refresh_metrics(&s);
        let categories = s.model().categories.clone();
        let shape = served.image.shape().to_vec();
        let png = png_bytes(&served.image)?;
        let resp = FrameResponse {
            status: "awaiting_label".into(),
            t: served.t,
            frame_id: served.frame_id,
            width: shape[2],
            height: shape[1],
            image_png: base64::engine::general_purpose::STANDARD.encode(png),
            prediction: served.prediction.iter().map(|d| wire(d, &categories)).collect(),
            categories,
        };
        Ok(Json(resp).into_response())
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn submit_label(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: axum::body::Bytes,
) -> Result<Json<LabelResponse>, ApiError> {
    let handle = state.get(&id)?;
    let req: LabelRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_request", e.to_string()))?;
    tokio::task::spawn_blocking(move || -> Result<Json<LabelResponse>, ApiError> {
        let mut s = match handle.session.try_lock() {
            Ok(s) => s,
            Err(std::sync::TryLockError::WouldBlock) => {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    "conflict",
                    "another label is being processed",
                ))
            }
            Err(std::sync::TryLockError::Poisoned(_)) => {
                return Err(ApiError::internal("session state poisoned".into()))
            }
        };
        let before = s.events().len();
        let step = s.submit_label(req.frame_id, req.categories.as_deref())?;
        let evals = s.events()[before..]
            .iter()
            .filter_map(|e| match e {
                SessionEvent::EvalCompleted(r) => Some(r.clone()),
                _ => None,
            })
            .collect();
        handle.flush_events(&s)?;
        handle.checkpoint(&s)?;
        handle.refresh_metrics(&s);
        Ok(Json(LabelResponse {
            step,
            evals,
            finished: s.is_finished(),
        }))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn metrics(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<Metrics>, ApiError> {
    let handle = state.get(&id)?;
    let snap = handle.metrics.read().expect("metrics lock").clone();
    Ok(Json((*snap).clone()))
}

fn sse_event(rec: &EventRecord) -> Result<Event, Infallible> {
    let kind = serde_json::to_value(&rec.event)
        .ok()
        .and_then(|v| v.get("kind").and_then(|k| k.as_str().map(str::to_string)))
        .unwrap_or_default();
    Ok(Event::default()
        .id(rec.seq.to_string())
        .event(kind)
        .data(serde_json::to_string(rec).expect("event serializes")))
}

type EventStream = std::pin::Pin<Box<dyn Stream<Item = Result<Event, Infallible>> + Send>>;

async fn events(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
) -> Result<Sse<KeepAliveStream<EventStream>>, ApiError> {
    let handle = state.get(&id)?;
    let stream: EventStream =
        if q.follow == Some(false) {
            let backlog = handle.hub.snapshot();
            Box::pin(futures::stream::iter(backlog.iter().map(sse_event).collect::<Vec<_>>()))
        } else {
            let (backlog, rx) = handle.hub.subscribe();
            let live = futures::stream::unfold(rx, |mut rx| async move {
                rx.recv().await.map(|rec| (sse_event(&rec), rx))
            });
            Box::pin(futures::stream::iter(backlog.iter().map(sse_event).collect::<Vec<_>>()).chain(live))
        };
    Ok(Sse::new(stream).keep_alive(KeepAlive::default()))
}

/// Reads an event log written by the server.
pub fn read_event_log(path: &std::path::Path) -> std::io::Result<Vec<EventRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}
