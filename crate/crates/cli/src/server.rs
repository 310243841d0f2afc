//! HTTP + server-sent events front end over a shared [`Engine`].

use std::collections::HashMap;
use std::convert::Infallible;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bimflow_core::io::event_from_json;
use bimflow_core::live::{Engine, SessionStore, StepView};
use bimflow_core::CoreError;
use chrono::Utc;
use futures::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::broadcast;
use tower_http::cors::CorsLayer;

pub const DEFAULT_K: usize = 10;

pub struct AppState {
    pub engine: Engine,
    pub sessions: SessionStore,
    /// Recommendation feeds of sessions with at least one open stream.
    feeds: Mutex<HashMap<String, broadcast::Sender<String>>>,
}

impl AppState {
    pub fn new(engine: Engine) -> Arc<Self> {
        Arc::new(AppState { engine, sessions: SessionStore::new(), feeds: Mutex::new(HashMap::new()) })
    }

    fn feed(&self, id: &str) -> broadcast::Sender<String> {
        self.feeds.lock().expect("feeds lock").entry(id.to_string()).or_insert_with(|| broadcast::channel(16).0).clone()
    }

    fn publish(&self, id: &str, k: usize) {
        let Some(tx) = self.feeds.lock().expect("feeds lock").get(id).cloned() else { return };
        if let Ok(body) = self.recommendations(id, k) {
            let _ = tx.send(body.to_string());
        }
    }

    fn recommendations(&self, id: &str, k: usize) -> Result<Value, ApiError> {
        let session = self.sessions.get(id)?;
        let steps = session.lock().expect("session lock").steps().to_vec();
        if steps.is_empty() {
            return Err(CoreError::EmptySession.into());
        }
        Ok(serde_json::to_value(self.engine.recommend(&steps, k)?).expect("response serializes"))
    }

    /// Drops sessions idle for `ttl` and their feeds.
    pub fn expire(&self, ttl: chrono::Duration) -> usize {
        let n = self.sessions.expire(ttl, Utc::now());
        self.feeds.lock().expect("feeds lock").retain(|id, _| self.sessions.get(id).is_ok());
        n
    }
}

pub struct ApiError(CoreError);

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match &self.0 {
            CoreError::UnknownSession(_) => (StatusCode::NOT_FOUND, json!({ "error": self.0.to_string() })),
            CoreError::Validation(fields) => {
                (StatusCode::UNPROCESSABLE_ENTITY, json!({ "error": "invalid event", "fields": fields }))
            }
            CoreError::EmptySession => (StatusCode::CONFLICT, json!({ "error": self.0.to_string() })),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": self.0.to_string() })),
        };
        (status, Json(body)).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/healthz", get(healthz))
        .route("/v1/vocabulary", get(vocabulary))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", get(session_state))
        .route("/v1/sessions/{id}/events", post(append_event))
        .route("/v1/sessions/{id}/recommendations", get(recommendations))
        .route("/v1/sessions/{id}/stream", get(stream))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

async fn healthz(State(s): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({
        "status": "ready",
        "version": s.engine.version,
        "vocabulary_hash": s.engine.checkpoint.vocabulary.hash(),
        "sessions": s.sessions.len(),
    }))
}

#[derive(Serialize)]
struct VocabEntry<'a> {
    id: usize,
    name: &'a str,
    is_workflow: bool,
    constituents: &'a [String],
}

async fn vocabulary(State(s): State<Arc<AppState>>) -> Json<Value> {
    let v = &s.engine.checkpoint.vocabulary;
    let items: Vec<VocabEntry> = v
        .items()
        .iter()
        .enumerate()
        .map(|(id, it)| VocabEntry { id, name: &it.name, is_workflow: it.is_workflow(), constituents: &it.constituents })
        .collect();
    Json(json!({ "hash": v.hash(), "items": items }))
}

async fn create_session(State(s): State<Arc<AppState>>) -> (StatusCode, Json<Value>) {
    let id = s.sessions.create(Utc::now());
    (StatusCode::CREATED, Json(json!({ "session_id": id })))
}

async fn session_state(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    let session = s.sessions.get(&id)?;
    let session = session.lock().expect("session lock");
    let steps: Vec<StepView> = session.views();
    Ok(Json(json!({ "session_id": id, "events": session.events().len(), "steps": steps })))
}

async fn append_event(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<Value>,
) -> Result<Json<Value>, ApiError> {
    let event = event_from_json(&body, &id)?;
    let session = s.sessions.get(&id)?;
    let delta = {
        let mut session = session.lock().expect("session lock");
        s.engine.append(&mut session, event, Utc::now())?
    };
    s.publish(&id, DEFAULT_K);
    Ok(Json(serde_json::to_value(delta).expect("delta serializes")))
}

#[derive(Deserialize)]
struct KQuery {
    k: Option<usize>,
}

async fn recommendations(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<KQuery>,
) -> Result<Json<Value>, ApiError> {
    let state = s.clone();
    let k = q.k.unwrap_or(DEFAULT_K);
    let body = tokio::task::spawn_blocking(move || state.recommendations(&id, k))
        .await
        .map_err(|e| ApiError(CoreError::Config(format!("recommendation task failed: {e}"))))??;
    Ok(Json(body))
}

async fn stream(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    s.sessions.get(&id)?;
    let rx = s.feed(&id).subscribe();
    // Current recommendations first, when there are any.
    let first = s.recommendations(&id, DEFAULT_K).ok().map(|v| v.to_string());
    let updates = stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(body) => return Some((body, rx)),
                Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    let events = stream::iter(first).chain(updates).map(|body| Ok(Event::default().event("recommendations").data(body)));
    Ok(Sse::new(events).keep_alive(KeepAlive::new().interval(Duration::from_secs(15))))
}
