//! HTTP and WebSocket backend for live trials.
//!
//! `POST /sessions` creates a trial from an interactive scenario,
//! `GET /sessions/{id}` returns its state and `/sessions/{id}/live` carries
//! the JSON event stream. Each session accepts one live connection; its
//! state is only touched by that connection's task.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;

use pairsim_core::engine::LogSink;
use pairsim_core::interactive::{ClientEvent, InteractiveSession, ServerEvent};
use pairsim_core::model::Scenario;

use crate::cli::CliError;

const TICK: Duration = Duration::from_millis(20);

struct Entry {
    session: InteractiveSession,
    live: bool,
}

#[derive(Clone, Default)]
pub struct AppState {
    sessions: Arc<Mutex<HashMap<String, Arc<Mutex<Entry>>>>>,
    sink: Option<Arc<LogSink>>,
}

impl AppState {
    pub fn new(sink: Option<LogSink>) -> Self {
        Self { sessions: Arc::default(), sink: sink.map(Arc::new) }
    }

    fn get(&self, id: &str) -> Option<Arc<Mutex<Entry>>> {
        self.sessions.lock().unwrap().get(id).cloned()
    }
}

/// Server clock in milliseconds since the UNIX epoch.
pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(|| async { Json(json!({ "status": "ok" })) }))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_state))
        .route("/sessions/{id}/live", get(live))
        .with_state(state)
}

fn error(status: StatusCode, msg: impl std::fmt::Display) -> Response {
    (status, Json(json!({ "error": msg.to_string() }))).into_response()
}

async fn create_session(State(state): State<AppState>, body: String) -> Response {
    let scenario: Scenario = match serde_json::from_str(&body) {
        Ok(s) => s,
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, format!("scenario is invalid: {e}")),
    };
    let id = uuid::Uuid::new_v4().simple().to_string();
    match InteractiveSession::new(id.clone(), scenario, InteractiveSession::random_seed()) {
        Ok(session) => {
            let descriptor = session.descriptor();
            state.sessions.lock().unwrap().insert(id, Arc::new(Mutex::new(Entry { session, live: false })));
            (StatusCode::CREATED, Json(descriptor)).into_response()
        }
        Err(e) => error(StatusCode::UNPROCESSABLE_ENTITY, e),
    }
}

async fn session_state(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Response {
    match state.get(&id) {
        Some(entry) => Json(entry.lock().unwrap().session.view()).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown session {id}")),
    }
}

async fn live(State(state): State<AppState>, UrlPath(id): UrlPath<String>, ws: WebSocketUpgrade) -> Response {
    let Some(entry) = state.get(&id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown session {id}"));
    };
    {
        let mut e = entry.lock().unwrap();
        if e.live {
            return error(StatusCode::CONFLICT, "session already has a live connection");
        }
        e.live = true;
    }
    ws.on_upgrade(move |socket| drive(socket, entry, state.sink.clone()))
}

/// Applies `f` to the session and returns what to send, logging any result.
fn step(entry: &Mutex<Entry>, sink: Option<&LogSink>, f: impl FnOnce(&mut InteractiveSession) -> Vec<ServerEvent>) -> Vec<String> {
    let events = f(&mut entry.lock().unwrap().session);
    events
        .iter()
        .map(|ev| {
            if let (ServerEvent::Result { record }, Some(sink)) = (ev, sink) {
                if let Err(e) = sink.append(record) {
                    eprintln!("cannot log trial: {e}");
                }
            }
            serde_json::to_string(ev).expect("events serialize")
        })
        .collect()
}

async fn send_all(socket: &mut WebSocket, out: Vec<String>) -> bool {
    for text in out {
        if socket.send(Message::Text(text.into())).await.is_err() {
            return false;
        }
    }
    true
}

async fn drive(mut socket: WebSocket, entry: Arc<Mutex<Entry>>, sink: Option<Arc<LogSink>>) {
    let sink = sink.as_deref();
    let out = step(&entry, sink, |s| s.begin(now_ms()));
    if !send_all(&mut socket, out).await {
        return release(&entry);
    }
    let mut ticker = tokio::time::interval(TICK);
    loop {
        let out = tokio::select! {
            msg = socket.recv() => match msg {
                Some(Ok(Message::Text(text))) => match serde_json::from_str::<ClientEvent>(&text) {
                    Ok(ev) => step(&entry, sink, |s| s.handle(ev, now_ms())),
                    Err(e) => vec![serde_json::to_string(&ServerEvent::Warn { msg: format!("bad event: {e}") }).unwrap()],
                },
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => Vec::new(),
            },
            _ = ticker.tick() => step(&entry, sink, |s| s.tick(now_ms())),
        };
        if !send_all(&mut socket, out).await {
            break;
        }
    }
    release(&entry);
}

fn release(entry: &Mutex<Entry>) {
    entry.lock().unwrap().live = false;
}

/// Binds `host:port` and serves until the process is stopped.
pub fn serve_blocking(host: &str, port: u16, log: Option<&Path>) -> Result<(), CliError> {
    let sink = log.map(LogSink::append_file).transpose().map_err(|e| CliError::Runtime(format!("cannot open log: {e}")))?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .map_err(|e| CliError::Runtime(format!("cannot listen on {host}:{port}: {e}")))?;
        let addr = listener.local_addr().map_err(|e| CliError::Runtime(e.to_string()))?;
        println!("listening http://{addr}");
        axum::serve(listener, router(AppState::new(sink))).await.map_err(|e| CliError::Runtime(e.to_string()))
    })
}
