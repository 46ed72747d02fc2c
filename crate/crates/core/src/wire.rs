//! JSON message set carried inside frames.
//!
//! Inference, registry and control traffic share one framing. Every message
//! is an object whose first key is `kind`.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{self, FrameError};
use crate::timing::Nanos;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("malformed message: {0}")]
    Json(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplyStatus {
    Ok,
    Error,
    Stopping,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlCommand {
    Stop,
    Ping,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    UnknownService,
    NotFound,
    ServiceDead,
    Timeout,
    Protocol,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Message {
    Infer {
        req_id: String,
        client_id: String,
        payload: String,
    },
    Reply {
        req_id: String,
        status: ReplyStatus,
        payload: String,
        t_svc_recv: Nanos,
        t_exec_start: Nanos,
        t_exec_end: Nanos,
        t_reply_ready: Nanos,
    },
    Register {
        uid: String,
        host: String,
        port: u16,
        pv: u32,
    },
    Heartbeat {
        uid: String,
        seq: u64,
    },
    Lookup {
        uid: String,
    },
    Control {
        uid: String,
        cmd: ControlCommand,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        grace_ms: Option<u64>,
    },
    /// First message a freshly spawned service sends; echoes its GPU set.
    Booted {
        uid: String,
        gpus: String,
        pid: u32,
    },
    /// Backend initialization finished.
    Initialized {
        uid: String,
    },
    Ack {
        uid: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        status: Option<String>,
    },
    Endpoint {
        uid: String,
        host: String,
        port: u16,
        pv: u32,
        registered_at: Nanos,
    },
    ControlAck {
        uid: String,
        cmd: ControlCommand,
        t_svc: Nanos,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
}

impl Message {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Self::Error {
            code,
            message: message.into(),
        }
    }
}

pub fn to_json(msg: &Message) -> Result<Vec<u8>, WireError> {
    serde_json::to_vec(msg).map_err(|e| WireError::Json(alloc::format!("{e}")))
}

pub fn from_json(body: &[u8]) -> Result<Message, WireError> {
    serde_json::from_slice(body).map_err(|e| WireError::Json(alloc::format!("{e}")))
}

/// Header plus JSON body, ready to write.
pub fn encode_message(msg: &Message) -> Result<Vec<u8>, WireError> {
    Ok(frame::encode_frame(&to_json(msg)?)?)
}

/// Reply fields known before the final stamp.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ReplyHead<'a> {
    pub req_id: &'a str,
    pub status: ReplyStatus,
    pub payload: &'a str,
    pub t_svc_recv: Nanos,
    pub t_exec_start: Nanos,
    pub t_exec_end: Nanos,
}

#[derive(Serialize)]
struct TaggedHead<'a> {
    kind: &'static str,
    #[serde(flatten)]
    head: &'a ReplyHead<'a>,
}

/// Serializes a reply frame, calling `stamp` for `t_reply_ready` only after
/// everything else (including the payload) has been serialized. The bytes
/// equal [`encode_message`] of the corresponding [`Message::Reply`].
pub fn encode_reply_frame(
    head: &ReplyHead<'_>,
    stamp: impl FnOnce() -> Nanos,
) -> Result<Vec<u8>, WireError> {
    let mut body = serde_json::to_vec(&TaggedHead {
        kind: "reply",
        head,
    })
    .map_err(|e| WireError::Json(alloc::format!("{e}")))?;
    debug_assert_eq!(body.last(), Some(&b'}'));
    body.pop();
    let mut tail = String::with_capacity(40);
    let _ = write!(tail, ",\"t_reply_ready\":{}}}", stamp());
    body.extend_from_slice(tail.as_bytes());
    Ok(frame::encode_frame(&body)?)
}
