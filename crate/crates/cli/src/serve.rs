//! HTTP mode: sessions held in memory, suites executed on the blocking pool.
//!
//! - `POST /session` with an optional `{"w_s", "w_e", "scale_n"}` body
//! - `POST /session/{id}/suite` with a list of `{"name", "arguments"}` calls
//! - `GET /session/{id}/state`

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use irag_core::engine::{render_tool_response, Action, Engine, ParseFailure, SessionState};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::Mutex;

pub struct AppState {
    engine: Arc<Engine>,
    defaults: SessionState,
    sessions: Mutex<HashMap<String, Arc<Mutex<SessionState>>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(engine: Arc<Engine>, defaults: SessionState) -> Self {
        Self { engine, defaults, sessions: Mutex::new(HashMap::new()), next_id: AtomicU64::new(1) }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/session", post(create_session))
        .route("/session/{id}/suite", post(run_suite))
        .route("/session/{id}/state", get(session_state))
        .with_state(state)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct NewSession {
    w_s: Option<f64>,
    w_e: Option<f64>,
    scale_n: Option<usize>,
}

async fn create_session(State(app): State<Arc<AppState>>, body: Option<Json<NewSession>>) -> Response {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    let d = &app.defaults;
    let session =
        match SessionState::new(req.w_s.unwrap_or(d.w_s), req.w_e.unwrap_or(d.w_e), req.scale_n.unwrap_or(d.scale_n)) {
            Ok(s) => s,
            Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        };
    let id = format!("s{}", app.next_id.fetch_add(1, Ordering::Relaxed));
    app.sessions.lock().await.insert(id.clone(), Arc::new(Mutex::new(session.clone())));
    (StatusCode::CREATED, Json(json!({ "id": id, "session": session }))).into_response()
}

async fn lookup(app: &AppState, id: &str) -> Option<Arc<Mutex<SessionState>>> {
    app.sessions.lock().await.get(id).cloned()
}

async fn session_state(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    match lookup(&app, &id).await {
        Some(s) => Json(json!({ "id": id, "session": *s.lock().await })).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("no session {id}")),
    }
}

/// Accepts either a bare list of calls or `{"actions": [...]}`.
fn calls_from(body: &Value) -> Result<Vec<Result<Action, ParseFailure>>, String> {
    let list = match body {
        Value::Array(items) => items,
        Value::Object(map) => match map.get("actions") {
            Some(Value::Array(items)) => items,
            _ => return Err("expected a list of calls or {\"actions\": [...]}".into()),
        },
        _ => return Err("expected a list of calls or {\"actions\": [...]}".into()),
    };
    Ok(list
        .iter()
        .map(|v| Action::from_call_json(v).map_err(|reason| ParseFailure { raw: v.to_string(), reason }))
        .collect())
}

async fn run_suite(State(app): State<Arc<AppState>>, Path(id): Path<String>, Json(body): Json<Value>) -> Response {
    let Some(slot) = lookup(&app, &id).await else {
        return error(StatusCode::NOT_FOUND, format!("no session {id}"));
    };
    let calls = match calls_from(&body) {
        Ok(c) => c,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    // Held across the search so a session only ever runs one suite at a time.
    let mut session = slot.lock().await;
    let engine = app.engine.clone();
    let current = session.clone();
    let joined = tokio::task::spawn_blocking(move || engine.execute_calls(&current, &calls)).await;
    let (next, response) = match joined {
        Ok(r) => r,
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };
    *session = next;
    Json(json!({
        "id": id,
        "session": response.session,
        "ok": !response.has_errors(),
        "tool_response": render_tool_response(&response),
    }))
    .into_response()
}

pub async fn serve(engine: Arc<Engine>, defaults: SessionState, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(AppState::new(engine, defaults)))).await
}
