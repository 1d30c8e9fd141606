//! Session server: one engine worker per WebSocket connection.
//!
//! `GET /health` returns the schema version, live session count and the
//! backend descriptor. `GET /ws` upgrades to the v1 message channel
//! described in [`protocol`].

pub mod protocol;
mod session;

use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use costroke_core::encoder::EncoderBackend;
use costroke_core::engine::PruneConfig;
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::mpsc;

use protocol::{error, parse_client, ClientBody, ErrorCode, ServerBody, ServerMessage, SCHEMA_VERSION};
use session::{Command, CreateRequest, SessionHandle};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("server error: {0}")]
    Io(#[from] std::io::Error),
}

/// Shared server state: the backend and the registry of live sessions.
#[derive(Clone)]
pub struct AppState {
    backend: Arc<dyn EncoderBackend>,
    sessions: Arc<Mutex<BTreeSet<String>>>,
    next_id: Arc<AtomicU64>,
}

impl AppState {
    pub fn new(backend: Arc<dyn EncoderBackend>) -> Self {
        Self { backend, sessions: Arc::default(), next_id: Arc::new(AtomicU64::new(1)) }
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("registry lock").len()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new().route("/health", get(health)).route("/ws", get(upgrade)).with_state(state)
}

/// Binds `addr` and serves until the process exits.
pub async fn serve(addr: SocketAddr, backend: Arc<dyn EncoderBackend>) -> Result<(), ServiceError> {
    let listener = TcpListener::bind(addr).await.map_err(|source| ServiceError::Bind { addr, source })?;
    serve_on(listener, AppState::new(backend)).await
}

pub async fn serve_on(listener: TcpListener, state: AppState) -> Result<(), ServiceError> {
    axum::serve(listener, router(state)).await?;
    Ok(())
}

async fn health(State(app): State<AppState>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "status": "ok",
        "schema": SCHEMA_VERSION,
        "sessions": app.session_count(),
        "backend": app.backend.descriptor(),
    }))
}

async fn upgrade(ws: WebSocketUpgrade, State(app): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| connection(socket, app)).into_response()
}

async fn connection(socket: WebSocket, app: AppState) {
    let (mut sink, mut stream) = socket.split();
    let (reply_tx, mut replies) = mpsc::unbounded_channel::<ServerMessage>();
    let mut session: Option<SessionHandle> = None;

    loop {
        let out = tokio::select! {
            incoming = stream.next() => match incoming {
                Some(Ok(Message::Text(text))) => on_text(&text, &app, &mut session, &reply_tx),
                Some(Ok(Message::Binary(_))) => Some(error(None, ErrorCode::Malformed, "binary frames are not part of the schema".into())),
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => None,
            },
            Some(reply) = replies.recv() => Some(reply),
            changed = async { session.as_mut().expect("guarded").snapshots.changed().await }, if session.is_some() => {
                match changed {
                    Ok(()) => session
                        .as_mut()
                        .and_then(|s| s.snapshots.borrow_and_update().clone())
                        .map(|snap| ServerBody::Snapshot(snap).into()),
                    Err(_) => {
                        session = None;
                        None
                    }
                }
            }
        };
        if let Some(msg) = out {
            let text = serde_json::to_string(&msg).expect("server frames serialize");
            if sink.send(Message::Text(text.into())).await.is_err() {
                break;
            }
        }
    }
}

/// Routes one client frame. Returns a frame to send immediately, if any;
/// everything else arrives later through the reply channel.
fn on_text(
    text: &str,
    app: &AppState,
    session: &mut Option<SessionHandle>,
    replies: &mpsc::UnboundedSender<ServerMessage>,
) -> Option<ServerMessage> {
    let msg = match parse_client(text) {
        Ok(m) => m,
        Err(frame) => return Some(frame),
    };
    let rid = msg.request_id;
    let cmd = match msg.body {
        ClientBody::CreateSession { prompt, config, svg, region, snapshot_every } => {
            if session.is_some() {
                return Some(error(Some(rid), ErrorCode::SessionExists, "this connection already has a session".into()));
            }
            let session_id = format!("s{}", app.next_id.fetch_add(1, Ordering::Relaxed));
            app.sessions.lock().expect("registry lock").insert(session_id.clone());
            let registry = app.sessions.clone();
            let sid = session_id.clone();
            let req = CreateRequest { request_id: rid, session_id, prompt, config, svg, region, snapshot_every };
            *session = Some(session::spawn(req, app.backend.clone(), replies.clone(), move || {
                registry.lock().expect("registry lock").remove(&sid);
            }));
            return None;
        }
        ClientBody::Edit { edit } => Command::Edit(rid, edit),
        ClientBody::Start { until } => Command::Start(rid, until),
        ClientBody::Pause => Command::Pause(rid),
        ClientBody::Prune { count, beta } => Command::Prune(rid, PruneConfig { count, beta }),
        ClientBody::Export => Command::Export(rid),
    };
    let Some(handle) = session.as_ref() else {
        return Some(error(command_id(&cmd), ErrorCode::NoSession, "send create_session first".into()));
    };
    if handle.commands.send(cmd).is_err() {
        *session = None;
        return Some(error(None, ErrorCode::NoSession, "the session has ended".into()));
    }
    None
}

fn command_id(cmd: &Command) -> Option<String> {
    match cmd {
        Command::Edit(r, _) | Command::Start(r, _) | Command::Pause(r) | Command::Prune(r, _) | Command::Export(r) => {
            Some(r.clone())
        }
    }
}
