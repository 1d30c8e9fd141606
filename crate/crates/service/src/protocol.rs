//! Message schema v1. Every frame is a JSON object with `"v": "v1"` and a
//! `"type"` tag; client frames also carry a `request_id` that the matching
//! `ack`, `error` or `exported` frame echoes.

use costroke_core::engine::{Edit, EditOutcome};
use costroke_core::io::Config;
use costroke_core::losses::LossBreakdown;
use costroke_core::sketch::Trace;
use costroke_core::TraceId;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: &str = "v1";

/// Snapshot cadence when `create_session` does not set one.
pub const DEFAULT_SNAPSHOT_EVERY: u64 = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientMessage {
    pub v: String,
    pub request_id: String,
    #[serde(flatten)]
    pub body: ClientBody,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientBody {
    /// Opens the connection's session. The server's backend is used
    /// regardless of `config.backend`.
    CreateSession {
        prompt: String,
        #[serde(default)]
        config: Option<Config>,
        /// Partial sketch in the supported SVG subset; blank canvas if absent.
        #[serde(default)]
        svg: Option<String>,
        /// `[x0, y0, x1, y1]`; the whole canvas if absent.
        #[serde(default)]
        region: Option<[f64; 4]>,
        #[serde(default)]
        snapshot_every: Option<u64>,
    },
    Edit {
        edit: Edit,
    },
    /// Steps continuously, or until the step counter reaches `until`.
    Start {
        #[serde(default)]
        until: Option<u64>,
    },
    Pause,
    Prune {
        count: usize,
        beta: f64,
    },
    Export,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerMessage {
    pub v: String,
    #[serde(flatten)]
    pub body: ServerBody,
}

impl From<ServerBody> for ServerMessage {
    fn from(body: ServerBody) -> Self {
        Self { v: SCHEMA_VERSION.into(), body }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerBody {
    Ack {
        request_id: String,
        session_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        outcome: Option<AckOutcome>,
    },
    Snapshot(Snapshot),
    Error {
        #[serde(default)]
        request_id: Option<String>,
        code: ErrorCode,
        detail: String,
        /// Engine step at which the failure happened, if any.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        step: Option<u64>,
    },
    Exported {
        request_id: String,
        svg: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AckOutcome {
    Edit(EditOutcome),
    Pruned { removed: Vec<TraceId> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub session_id: String,
    pub step: u64,
    pub running: bool,
    pub traces: Vec<Trace>,
    pub loss: LossBreakdown,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    /// Not JSON, or not a valid v1 client frame.
    Malformed,
    UnsupportedVersion,
    /// A session-scoped message arrived before `create_session`.
    NoSession,
    SessionExists,
    /// Valid frame whose content the engine rejected (bad SVG, bad edit).
    Input,
    /// The engine failed while stepping.
    Engine,
}

/// Parses a client frame, or returns the error frame to send back.
pub fn parse_client(text: &str) -> Result<ClientMessage, ServerMessage> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| error(None, ErrorCode::Malformed, e.to_string()))?;
    let request_id = value.get("request_id").and_then(|r| r.as_str()).map(str::to_owned);
    match value.get("v").and_then(|v| v.as_str()) {
        Some(SCHEMA_VERSION) => {}
        Some(other) => {
            return Err(error(request_id, ErrorCode::UnsupportedVersion, format!("schema `{other}` is not supported, use `v1`")))
        }
        None => return Err(error(request_id, ErrorCode::Malformed, "missing `v` field".into())),
    }
    serde_json::from_value(value).map_err(|e| error(request_id, ErrorCode::Malformed, e.to_string()))
}

pub(crate) fn error(request_id: Option<String>, code: ErrorCode, detail: String) -> ServerMessage {
    ServerBody::Error { request_id, code, detail, step: None }.into()
}
