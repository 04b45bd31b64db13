//! HTTP API over a loaded checkpoint: diagnose a clip, then ask follow-up
//! questions on the resulting session.
//!
//! | route                              | success                                   | errors            |
//! |------------------------------------|-------------------------------------------|-------------------|
//! | `POST /api/v1/diagnose` (multipart) | `{session_id, raw_text, label, parse_status}` | 400, 413, 503 |
//! | `POST /api/v1/sessions/{id}/ask`   | `{answer, turn_index}`                    | 400, 404, 409, 503 |
//! | `GET /api/v1/health`               | `{status, checkpoint, model_config}`      | 503               |
//!
//! Error bodies are `{"error": message}`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use anyhow::Context;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::cors::{Any, CorsLayer};

use crate::cli::{try_engine, ServeArgs};
use crate::diagnose::{DialogueSession, Engine};
use crate::net::ModelConfig;
use crate::sigproc::decode_wav;

pub const DEFAULT_TTL_SECS: u64 = 30 * 60;
/// Longest accepted clip.
pub const MAX_CLIP_S: f64 = 60.0;
/// Upload cap; a 60 s clip at 48 kHz PCM16 is about 5.8 MB.
pub const MAX_UPLOAD_BYTES: usize = 8 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseResponse {
    pub session_id: String,
    pub raw_text: String,
    pub label: Option<String>,
    pub parse_status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskRequest {
    pub question: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AskResponse {
    pub answer: String,
    pub turn_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub checkpoint: Option<String>,
    pub model_config: Option<ModelConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug)]
pub struct ApiSession {
    pub created_at: Instant,
    pub last_active: Instant,
    pub dialogue: DialogueSession,
}

type SessionHandle = Arc<tokio::sync::Mutex<ApiSession>>;

/// Shared server state.
#[derive(Clone)]
pub struct AppState {
    pub engine: Option<Arc<Engine>>,
    pub checkpoint: Option<String>,
    pub ttl: Duration,
    sessions: Arc<Mutex<HashMap<String, SessionHandle>>>,
}

impl AppState {
    pub fn new(engine: Option<Engine>, checkpoint: Option<String>, ttl: Duration) -> Self {
        Self {
            engine: engine.map(Arc::new),
            checkpoint,
            ttl,
            sessions: Arc::default(),
        }
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    /// The lock guarding one session, if it is live.
    pub fn session(&self, id: &str) -> Option<SessionHandle> {
        self.sessions.lock().unwrap().get(id).cloned()
    }

    /// Drops sessions idle for longer than the TTL. Sessions currently in use are kept.
    pub fn evict_expired(&self) -> usize {
        let now = Instant::now();
        let mut map = self.sessions.lock().unwrap();
        let before = map.len();
        map.retain(|_, s| match s.try_lock() {
            Ok(s) => now.duration_since(s.last_active) <= self.ttl,
            Err(_) => true,
        });
        before - map.len()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn no_model() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "model not loaded")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

pub fn router(state: AppState, cors_origin: Option<&str>) -> Router {
    let cors = match cors_origin.and_then(|o| HeaderValue::from_str(o).ok()) {
        Some(origin) => CorsLayer::new().allow_origin(origin),
        None => CorsLayer::new().allow_origin(Any),
    }
    .allow_methods(Any)
    .allow_headers(Any);
    Router::new()
        .route("/api/v1/health", get(health))
        .route("/api/v1/diagnose", post(diagnose))
        .route("/api/v1/sessions/{id}/ask", post(ask))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .layer(cors)
        .with_state(state)
}

async fn health(State(state): State<AppState>) -> Response {
    match &state.engine {
        Some(e) => Json(HealthResponse {
            status: "ok".into(),
            checkpoint: state.checkpoint.clone(),
            model_config: Some(e.model.cfg.clone()),
        })
        .into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(HealthResponse {
                status: "unavailable".into(),
                checkpoint: state.checkpoint.clone(),
                model_config: None,
            }),
        )
            .into_response(),
    }
}

async fn read_upload(mut mp: Multipart) -> Result<Vec<u8>, ApiError> {
    let too_large = |e: axum::extract::multipart::MultipartError| {
        let status = e.status();
        if status == StatusCode::PAYLOAD_TOO_LARGE {
            ApiError::new(status, "upload too large")
        } else {
            ApiError::new(StatusCode::BAD_REQUEST, format!("malformed multipart body: {}", e.body_text()))
        }
    };
    while let Some(field) = mp.next_field().await.map_err(too_large)? {
        if field.file_name().is_some() || field.name() == Some("file") {
            return Ok(field.bytes().await.map_err(too_large)?.to_vec());
        }
    }
    Err(ApiError::new(StatusCode::BAD_REQUEST, "no wav file in upload"))
}

async fn diagnose(State(state): State<AppState>, mp: Multipart) -> Result<Json<DiagnoseResponse>, ApiError> {
    let engine = state.engine.clone().ok_or_else(ApiError::no_model)?;
    state.evict_expired();
    let bytes = read_upload(mp).await?;
    let clip = decode_wav(&bytes).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    if clip.duration_s() > MAX_CLIP_S {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("clip lasts {:.1} s, limit is {MAX_CLIP_S} s", clip.duration_s()),
        ));
    }
    let session_id = uuid::Uuid::new_v4().to_string();
    let id = session_id.clone();
    let (d, dialogue) = tokio::task::spawn_blocking(move || engine.open_session(id, &clip))
        .await
        .map_err(internal)?
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let now = Instant::now();
    let session = ApiSession {
        created_at: now,
        last_active: now,
        dialogue,
    };
    state
        .sessions
        .lock()
        .unwrap()
        .insert(session_id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    Ok(Json(DiagnoseResponse {
        session_id,
        raw_text: d.raw_text,
        label: d.parsed_label,
        parse_status: d.parse_status.as_str().into(),
    }))
}

async fn ask(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<AskRequest>,
) -> Result<Json<AskResponse>, ApiError> {
    let engine = state.engine.clone().ok_or_else(ApiError::no_model)?;
    state.evict_expired();
    let handle = state
        .session(&id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("session {id} not found or expired")))?;
    let mut guard = handle
        .try_lock_owned()
        .map_err(|_| ApiError::new(StatusCode::CONFLICT, format!("session {id} is answering another question")))?;
    if guard.last_active.elapsed() > state.ttl {
        state.sessions.lock().unwrap().remove(&id);
        return Err(ApiError::new(StatusCode::NOT_FOUND, format!("session {id} not found or expired")));
    }
    let question = req.question.trim().to_string();
    if question.is_empty() {
        return Err(ApiError::new(StatusCode::BAD_REQUEST, "empty question"));
    }
    let (guard, answer) = tokio::task::spawn_blocking(move || {
        let answer = engine.follow_up(&mut guard.dialogue, &question);
        (guard, answer)
    })
    .await
    .map_err(internal)?;
    let mut guard = guard;
    let answer = answer.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    guard.last_active = Instant::now();
    Ok(Json(AskResponse {
        answer,
        turn_index: guard.dialogue.history.len(),
    }))
}

/// Serves on an already bound listener until `shutdown` resolves.
pub async fn serve_on<F>(listener: tokio::net::TcpListener, state: AppState, cors_origin: Option<String>, shutdown: F) -> anyhow::Result<()>
where
    F: std::future::Future<Output = ()> + Send + 'static,
{
    let sweeper = state.clone();
    let sweep = tokio::spawn(async move {
        let mut tick = tokio::time::interval(Duration::from_secs(60));
        loop {
            tick.tick().await;
            let n = sweeper.evict_expired();
            if n > 0 {
                log::info!("evicted {n} idle sessions");
            }
        }
    });
    log::info!("listening on http://{}", listener.local_addr()?);
    let out = axum::serve(listener, router(state, cors_origin.as_deref()))
        .with_graceful_shutdown(shutdown)
        .await;
    sweep.abort();
    Ok(out?)
}

/// Binds `addr` and serves until ctrl-c.
pub async fn serve(state: AppState, addr: SocketAddr, cors_origin: Option<String>) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    serve_on(listener, state, cors_origin, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}

/// Entry point for `vibrodiag serve`. A checkpoint that fails to load leaves
/// the server up, answering 503.
pub fn serve_blocking(a: ServeArgs) -> anyhow::Result<()> {
    let engine = try_engine(&a.ckpt);
    let state = AppState::new(
        engine,
        Some(PathBuf::from(&a.ckpt).display().to_string()),
        Duration::from_secs(a.ttl_secs),
    );
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .with_context(|| format!("bad listen address {}:{}", a.host, a.port))?;
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(serve(state, addr, a.cors_origin))
}
