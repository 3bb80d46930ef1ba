//! HTTP service: one dialogue session per paragraph, answered with the
//! model's own earlier answers as history.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cmc_core::{AnswerType, DialogueState, HistoryFlags, Prediction, Predictor};
use serde::{Deserialize, Serialize};
use serde_json::json;

struct Session {
    state: DialogueState,
    last_used: Instant,
}

pub struct AppState {
    predictor: Predictor,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    ttl: Duration,
}

impl AppState {
    pub fn new(predictor: Predictor, ttl: Duration) -> Arc<Self> {
        Arc::new(Self {
            predictor,
            sessions: Mutex::new(HashMap::new()),
            ttl,
        })
    }

    /// Drops sessions idle for longer than the TTL; returns how many.
    pub fn evict_expired(&self) -> usize {
        let mut sessions = self.sessions.lock().expect("session map lock");
        let before = sessions.len();
        sessions.retain(|_, s| match s.try_lock() {
            Ok(s) => s.last_used.elapsed() <= self.ttl,
            // Busy sessions are in use, so not idle.
            Err(_) => true,
        });
        before - sessions.len()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session map lock").len()
    }

    fn session(&self, id: &str) -> Option<Arc<Mutex<Session>>> {
        self.sessions.lock().expect("session map lock").get(id).cloned()
    }
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

fn not_found(id: &str) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, format!("no session {id}"))
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload.map(|Json(v)| v).map_err(|e| bad_request(e.body_text()))
}

#[derive(Debug, Deserialize)]
pub struct CreateSession {
    pub paragraph: String,
    pub k: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub k: usize,
    /// Char offsets `[begin, end)` of each paragraph token.
    pub alignment: Vec<[usize; 2]>,
}

#[derive(Debug, Deserialize)]
pub struct Ask {
    pub question: String,
}

/// One answered turn as returned by `/ask` and `/history`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnView {
    pub turn: usize,
    pub question: String,
    pub answer: String,
    #[serde(rename = "type")]
    pub answer_type: AnswerType,
    /// Char offsets `[start, end)` of the decoded span in the paragraph.
    pub span: [usize; 2],
    /// Inclusive token indices of the span.
    pub token_span: [usize; 2],
    pub span_text: String,
    pub score: f64,
}

impl TurnView {
    fn new(turn: usize, question: &str, p: &Prediction) -> Self {
        Self {
            turn,
            question: question.to_string(),
            answer: p.answer.clone(),
            answer_type: p.answer_type,
            span: [p.char_start, p.char_end],
            token_span: [p.start_token, p.end_token],
            span_text: p.span_text.clone(),
            score: p.score,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct HistoryView {
    pub session_id: String,
    /// Paragraph as answered, including any appended sentinel.
    pub paragraph: String,
    pub k: usize,
    pub alignment: Vec<[usize; 2]>,
    pub turns: Vec<TurnView>,
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    payload: Result<Json<CreateSession>, JsonRejection>,
) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let req = body(payload)?;
    if req.paragraph.trim().is_empty() {
        return Err(bad_request("paragraph is empty"));
    }
    let id = uuid::Uuid::new_v4().to_string();
    let app2 = Arc::clone(&app);
    let id2 = id.clone();
    let state = tokio::task::spawn_blocking(move || {
        DialogueState::new(&app2.predictor, id2, &req.paragraph, req.k, HistoryFlags::default())
    })
    .await
    .map_err(internal)?
    .map_err(|e| bad_request(e.to_string()))?;
    let k = state.history_limit();
    let alignment = state.paragraph().char_alignment();
    app.sessions.lock().expect("session map lock").insert(
        id.clone(),
        Arc::new(Mutex::new(Session {
            state,
            last_used: Instant::now(),
        })),
    );
    Ok((StatusCode::CREATED, Json(SessionCreated { session_id: id, k, alignment })))
}

async fn ask(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    payload: Result<Json<Ask>, JsonRejection>,
) -> Result<Json<TurnView>, ApiError> {
    let session = app.session(&id).ok_or_else(|| not_found(&id))?;
    let req = body(payload)?;
    if req.question.trim().is_empty() {
        return Err(bad_request("question is empty"));
    }
    let view = tokio::task::spawn_blocking(move || {
        let mut s = session.lock().expect("session lock");
        s.last_used = Instant::now();
        let p = s.state.ask(&app.predictor, &req.question)?;
        Ok::<_, cmc_core::Error>(TurnView::new(s.state.history().len(), &req.question, &p))
    })
    .await
    .map_err(internal)?
    .map_err(internal)?;
    Ok(Json(view))
}

async fn history(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<HistoryView>, ApiError> {
    let session = app.session(&id).ok_or_else(|| not_found(&id))?;
    let mut s = session.lock().expect("session lock");
    s.last_used = Instant::now();
    let turns = s
        .state
        .history()
        .iter()
        .enumerate()
        .map(|(i, (q, p))| TurnView::new(i + 1, q, p))
        .collect();
    Ok(Json(HistoryView {
        session_id: id,
        paragraph: s.state.paragraph().text.clone(),
        k: s.state.history_limit(),
        alignment: s.state.paragraph().char_alignment(),
        turns,
    }))
}

async fn delete_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    match app.sessions.lock().expect("session map lock").remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(not_found(&id)),
    }
}

async fn health(State(app): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "sessions": app.session_count(), "k": app.predictor.k() }))
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/:id/ask", post(ask))
        .route("/sessions/:id/history", get(history))
        .route("/sessions/:id", axum::routing::delete(delete_session))
        .with_state(app)
}

/// Serves on `listener` until `shutdown` resolves, evicting idle sessions
/// in the background.
pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let sweeper = Arc::clone(&app);
    let period = (app.ttl / 4).max(Duration::from_millis(50));
    let sweep = tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let n = sweeper.evict_expired();
            if n > 0 {
                log::info!("evicted {n} idle sessions");
            }
        }
    });
    let result = axum::serve(listener, router(app)).with_graceful_shutdown(shutdown).await;
    sweep.abort();
    result
}
