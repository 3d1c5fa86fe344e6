//! HTTP front end for tutoring sessions.
//!
//! Each session sits behind its own async mutex so turns on one session are
//! serialized while distinct sessions proceed in parallel. Turns run on the
//! blocking pool because backends may do synchronous I/O or heavy scoring.

mod remote;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use stepwise_core::astseg::SubtaskPlan;
use stepwise_core::tutor::{
    FilterVerdict, ModelBackend, SessionState, SystemPrompt, Tutor, TutorConfig, TutorError,
};
use stepwise_core::Index;
use thiserror::Error;

pub use remote::{RemoteBackend, RemoteRequest, RemoteResponse};

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("no session {0}")]
    UnknownSession(String),
    #[error(transparent)]
    Tutor(#[from] TutorError),
    #[error("turn worker failed: {0}")]
    Worker(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self {
            ApiError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ApiError::Tutor(TutorError::Backend(_)) => StatusCode::BAD_GATEWAY,
            ApiError::Tutor(_) => StatusCode::BAD_REQUEST,
            ApiError::Worker(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub task_source: String,
    pub system_prompt: Option<SystemPrompt>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub plan: SubtaskPlan,
}

#[derive(Debug, Deserialize)]
pub struct PostMessage {
    pub content: String,
    /// Repeating a key returns the recorded reply without a new turn.
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MessageReply {
    pub reply: String,
    pub verdict: FilterVerdict,
    pub current_subtask: usize,
    pub reverted: bool,
}

struct Slot {
    state: SessionState,
    replies: HashMap<String, MessageReply>,
}

type SlotRef = Arc<tokio::sync::Mutex<Slot>>;

pub struct AppState {
    backend: Arc<dyn ModelBackend>,
    index: Option<Arc<Index>>,
    config: TutorConfig,
    sessions: Mutex<HashMap<String, SlotRef>>,
}

impl AppState {
    pub fn new(backend: Arc<dyn ModelBackend>, index: Option<Arc<Index>>, config: TutorConfig) -> Result<Self, TutorError> {
        // surfaces an index/embedder mismatch at startup rather than per turn
        Tutor::new(backend.as_ref(), index.as_deref(), config)?;
        Ok(Self { backend, index, config, sessions: Mutex::new(HashMap::new()) })
    }

    fn slot(&self, id: &str) -> Result<SlotRef, ApiError> {
        self.sessions.lock().expect("session table lock").get(id).cloned().ok_or_else(|| ApiError::UnknownSession(id.into()))
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session table lock").len()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/session", post(create_session))
        .route("/session/{id}/message", post(post_message))
        .route("/session/{id}/state", get(session_state))
        .with_state(state)
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    Json(req): Json<CreateSession>,
) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let id = uuid::Uuid::new_v4().to_string();
    let state = SessionState::new(id.clone(), &req.task_source, req.system_prompt.unwrap_or_default())?;
    let plan = state.plan.clone();
    let slot = Arc::new(tokio::sync::Mutex::new(Slot { state, replies: HashMap::new() }));
    app.sessions.lock().expect("session table lock").insert(id.clone(), slot);
    tracing::info!(session = %id, subtasks = plan.len(), "session created");
    Ok((StatusCode::CREATED, Json(SessionCreated { session_id: id, plan })))
}

async fn post_message(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<PostMessage>,
) -> Result<Json<MessageReply>, ApiError> {
    let mut slot = app.slot(&id)?.lock_owned().await;
    if let Some(prev) = req.idempotency_key.as_ref().and_then(|k| slot.replies.get(k)) {
        return Ok(Json(prev.clone()));
    }
    let worker_app = app.clone();
    let out = tokio::task::spawn_blocking(move || {
        let tutor = Tutor::new(worker_app.backend.as_ref(), worker_app.index.as_deref(), worker_app.config)?;
        let turn = tutor.advance_turn(&mut slot.state, &req.content);
        let reply = turn.map(|t| MessageReply {
            reply: t.reply,
            verdict: t.verdict,
            current_subtask: t.current_subtask,
            reverted: t.reverted,
        })?;
        if let Some(k) = req.idempotency_key {
            slot.replies.insert(k, reply.clone());
        }
        Ok::<_, TutorError>(reply)
    })
    .await
    .map_err(|e| ApiError::Worker(e.to_string()))??;
    Ok(Json(out))
}

async fn session_state(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionState>, ApiError> {
    let slot = app.slot(&id)?;
    let guard = slot.lock().await;
    Ok(Json(guard.state.clone()))
}

/// Binds and serves until ctrl-c.
pub async fn serve(app: Arc<AppState>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
