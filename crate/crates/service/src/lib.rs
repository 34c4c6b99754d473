//! HTTP facade over the dialogue engine: session creation, synchronous
//! message exchange, transcripts and post-chat questionnaires.

mod request_log;

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{MatchedPath, Path, Request, State};
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use mixinit_core::config::{ConfigError, ServiceConfig};
use mixinit_core::engine::{DialogueEngine, EngineError};
use mixinit_core::interactive::{
    summarize, validate_submission, RatingError, RatingLog, RatingSubmission, RecordError, ValidationQuestion,
    INTERACTIVE_ITEMS, REVERSE_SCORED_ITEMS,
};
use mixinit_core::{PolicyKind, TaskKind};

pub use request_log::RequestLog;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot open {what}: {source}")]
    Open {
        what: &'static str,
        #[source]
        source: std::io::Error,
    },
    #[error("server: {0}")]
    Serve(#[from] std::io::Error),
}

/// Per-deployment settings the handlers need beyond the engine.
#[derive(Debug, Clone)]
pub struct ServiceSettings {
    pub policy: PolicyKind,
    pub disclosure_text: String,
    pub rating_unlock_user_turns: usize,
    pub validation: ValidationQuestion,
    pub message_timeout: Duration,
    pub privacy_mode: bool,
}

impl ServiceSettings {
    pub fn from_config(config: &ServiceConfig) -> Self {
        Self {
            policy: config.session_policy(),
            disclosure_text: config.disclosure_text.clone(),
            rating_unlock_user_turns: config.rating_unlock_user_turns,
            validation: config.validation.clone(),
            message_timeout: Duration::from_secs(config.message_timeout_secs),
            privacy_mode: config.privacy_mode,
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    engine: Arc<DialogueEngine>,
    ratings: Arc<RatingLog>,
    settings: Arc<ServiceSettings>,
    request_log: Option<Arc<RequestLog>>,
}

impl AppState {
    pub fn new(engine: DialogueEngine, ratings: RatingLog, settings: ServiceSettings) -> Self {
        Self {
            engine: Arc::new(engine),
            ratings: Arc::new(ratings),
            settings: Arc::new(settings),
            request_log: None,
        }
    }

    pub fn with_request_log(mut self, log: RequestLog) -> Self {
        self.request_log = Some(Arc::new(log));
        self
    }

    /// Builds everything a config describes.
    pub fn from_config(config: &ServiceConfig) -> Result<Self, ServiceError> {
        let engine = config.build_engine()?;
        let ratings = RatingLog::open(&config.ratings_path).map_err(|source| ServiceError::Open {
            what: "ratings log",
            source,
        })?;
        let mut state = Self::new(engine, ratings, ServiceSettings::from_config(config));
        if let Some(path) = &config.request_log {
            let log = RequestLog::open(path).map_err(|source| ServiceError::Open {
                what: "request log",
                source,
            })?;
            state = state.with_request_log(log);
        }
        Ok(state)
    }
}

/// JSON error body. `retriable` tells the client whether resending the
/// same request may succeed.
#[derive(Debug, Serialize)]
struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    error: String,
    retriable: bool,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>, retriable: bool) -> Self {
        Self {
            status,
            error: error.into(),
            retriable,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self)).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let retriable = e.is_retriable();
        let status = match &e {
            EngineError::UnknownSession(_) => StatusCode::NOT_FOUND,
            EngineError::SessionBusy | EngineError::SessionClosed => StatusCode::CONFLICT,
            EngineError::EmptyInput => StatusCode::UNPROCESSABLE_ENTITY,
            EngineError::UnsupportedTask(_) | EngineError::UnsupportedPolicy => StatusCode::BAD_REQUEST,
            EngineError::Generation { retriable: true, .. } => StatusCode::SERVICE_UNAVAILABLE,
            EngineError::Generation { retriable: false, .. } => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status == StatusCode::INTERNAL_SERVER_ERROR {
            tracing::error!(error = %e, "internal error");
            return ApiError::new(status, "internal error", false);
        }
        ApiError::new(status, e.to_string(), retriable)
    }
}

fn json_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, format!("invalid body: {e}"), false))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, EngineError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal error", false))?
        .map_err(ApiError::from)
}

#[derive(Deserialize, Default)]
struct CreateSessionBody {
    #[serde(default)]
    task: Option<TaskKind>,
}

#[derive(Serialize)]
struct CreateSessionResponse {
    session_id: String,
    opening_message: String,
    intent: String,
    disclosure_text: String,
}

async fn create_session(State(app): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateSessionBody = if body.iter().all(u8::is_ascii_whitespace) {
        CreateSessionBody::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid body: {e}"), false))?
    };
    let task = req.task.unwrap_or(TaskKind::P4g);
    let engine = app.engine.clone();
    let policy = app.settings.policy.clone();
    let created = blocking(move || engine.create_session(task, policy)).await?;
    let body = CreateSessionResponse {
        session_id: created.session_id,
        opening_message: created.opening.text,
        intent: created.opening.intent.name().to_string(),
        disclosure_text: app.settings.disclosure_text.clone(),
    };
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

#[derive(Deserialize)]
struct MessageBody {
    text: String,
}

#[derive(Serialize)]
struct MessageResponse {
    reply: Option<String>,
    intent: Option<String>,
    retrieval_used: bool,
    session_closed: bool,
    rating_unlocked: bool,
}

async fn post_message(
    State(app): State<AppState>,
    Path(session_id): Path<String>,
    body: Bytes,
) -> Result<Json<MessageResponse>, ApiError> {
    let msg: MessageBody = json_body(&body)?;
    if !app.settings.privacy_mode {
        if let Some(log) = &app.request_log {
            log.write(&json!({"kind": "message", "session_id": session_id, "text": msg.text}));
        }
    }
    let engine = app.engine.clone();
    let id = session_id.clone();
    let unlock_after = app.settings.rating_unlock_user_turns;
    let work = blocking(move || {
        let outcome = engine.user_message(&id, &msg.text)?;
        let unlocked = engine.session(&id)?.rating_unlocked(unlock_after);
        Ok((outcome, unlocked))
    });
    let (outcome, rating_unlocked) = match tokio::time::timeout(app.settings.message_timeout, work).await {
        Ok(result) => result?,
        Err(_) => {
            tracing::warn!(session_id, "message timed out");
            return Err(ApiError::new(StatusCode::GATEWAY_TIMEOUT, "reply took too long", true));
        }
    };
    Ok(Json(MessageResponse {
        intent: outcome.reply.as_ref().map(|r| r.intent.name().to_string()),
        retrieval_used: outcome.reply.as_ref().is_some_and(|r| r.retrieval_used),
        reply: outcome.reply.map(|r| r.text),
        session_closed: outcome.session_closed,
        rating_unlocked,
    }))
}

async fn get_transcript(State(app): State<AppState>, Path(session_id): Path<String>) -> Result<Response, ApiError> {
    let engine = app.engine.clone();
    let transcript = blocking(move || engine.export_transcript(&session_id)).await?;
    Ok(Json(transcript).into_response())
}

async fn post_ratings(
    State(app): State<AppState>,
    Path(session_id): Path<String>,
    body: Bytes,
) -> Result<StatusCode, ApiError> {
    let engine = app.engine.clone();
    let id = session_id.clone();
    let state = blocking(move || engine.session(&id)).await?;
    if app.ratings.has_submitted(&session_id) {
        return Err(ApiError::new(StatusCode::CONFLICT, RatingError::AlreadySubmitted.to_string(), false));
    }
    if !state.rating_unlocked(app.settings.rating_unlock_user_turns) {
        return Err(ApiError::new(StatusCode::CONFLICT, "ratings open after the chat ends", false));
    }
    let submission: RatingSubmission = json_body(&body)?;
    let records = validate_submission(&session_id, &submission, &app.settings.validation, chrono::Utc::now())
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string(), false))?;
    match app.ratings.record(records) {
        Ok(()) => Ok(StatusCode::NO_CONTENT),
        Err(RecordError::Rating(e)) => Err(ApiError::new(StatusCode::CONFLICT, e.to_string(), false)),
        Err(RecordError::Io(e)) => {
            tracing::error!(error = %e, "cannot persist ratings");
            Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal error", true))
        }
    }
}

#[derive(Serialize)]
struct SummaryItem {
    item: &'static str,
    reverse_scored: bool,
    n: usize,
    mean: Option<f64>,
    std: Option<f64>,
}

async fn ratings_summary(State(app): State<AppState>) -> Json<serde_json::Value> {
    let all = app.ratings.all();
    let summary = summarize(&all);
    let items: Vec<SummaryItem> = INTERACTIVE_ITEMS
        .iter()
        .map(|item| {
            let s = summary.get(*item);
            SummaryItem {
                item,
                reverse_scored: REVERSE_SCORED_ITEMS.contains(item),
                n: s.map_or(0, |s| s.n),
                mean: s.map(|s| s.mean),
                std: s.map(|s| s.std),
            }
        })
        .collect();
    let sessions = all.iter().map(|r| r.session_id.as_str()).collect::<std::collections::HashSet<_>>().len();
    Json(json!({ "sessions": sessions, "items": items }))
}

async fn health() -> &'static str {
    "ok"
}

async fn log_requests(State(app): State<AppState>, request: Request, next: Next) -> Response {
    let Some(log) = app.request_log.clone() else {
        return next.run(request).await;
    };
    let started = Instant::now();
    let method = request.method().to_string();
    let route = request
        .extensions()
        .get::<MatchedPath>()
        .map(|p| p.as_str().to_string())
        .unwrap_or_else(|| request.uri().path().to_string());
    let path = request.uri().path().to_string();
    let response = next.run(request).await;
    log.write(&json!({
        "kind": "request",
        "method": method,
        "route": route,
        "path": path,
        "status": response.status().as_u16(),
        "latency_ms": started.elapsed().as_millis() as u64,
    }));
    response
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/transcript", get(get_transcript))
        .route("/sessions/{id}/ratings", post(post_ratings))
        .route("/ratings/summary", get(ratings_summary))
        .layer(middleware::from_fn_with_state(state.clone(), log_requests))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await?;
    Ok(())
}
