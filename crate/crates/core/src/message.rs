//! The `EnhancedMessage` wire unit and its JSON encoding.
//!
//! Every interaction between the controller and the execution backend is one
//! JSON object per transport frame. Decoding is strict about the message type
//! and the per-type payload schema, and lenient about unknown extra keys.

use alloc::borrow::ToOwned;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Type-specific message payload.
pub type Payload = Map<String, Value>;

/// Source of message identifiers.
pub trait IdGen {
    fn next_id(&mut self) -> String;
}

/// Deterministic `prefix-N` identifiers, used by tests and the loopback transport.
#[derive(Debug, Clone)]
pub struct SequentialIds {
    prefix: String,
    next: u64,
}

impl SequentialIds {
    pub fn new(prefix: &str) -> Self {
        Self {
            prefix: prefix.to_owned(),
            next: 0,
        }
    }
}

impl IdGen for SequentialIds {
    fn next_id(&mut self) -> String {
        self.next += 1;
        format!("{}-{}", self.prefix, self.next)
    }
}

impl<T: IdGen + ?Sized> IdGen for alloc::boxed::Box<T> {
    fn next_id(&mut self) -> String {
        (**self).next_id()
    }
}

/// Functional grouping of message types.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    OperationLifecycle,
    StreamingOutput,
    StateSync,
    SessionManagement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageType {
    OperationRequest,
    OperationAck,
    OperationStart,
    OperationProgress,
    OperationComplete,
    OperationFailed,
    CodeOutput,
    CodeStatus,
    CodeDebug,
    CodeEvent,
    ModelStateUpdate,
    StateVerification,
    StateConfirmed,
    SessionInit,
    Heartbeat,
    Error,
}

impl MessageType {
    pub const ALL: [MessageType; 16] = [
        MessageType::OperationRequest,
        MessageType::OperationAck,
        MessageType::OperationStart,
        MessageType::OperationProgress,
        MessageType::OperationComplete,
        MessageType::OperationFailed,
        MessageType::CodeOutput,
        MessageType::CodeStatus,
        MessageType::CodeDebug,
        MessageType::CodeEvent,
        MessageType::ModelStateUpdate,
        MessageType::StateVerification,
        MessageType::StateConfirmed,
        MessageType::SessionInit,
        MessageType::Heartbeat,
        MessageType::Error,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MessageType::OperationRequest => "operation_request",
            MessageType::OperationAck => "operation_ack",
            MessageType::OperationStart => "operation_start",
            MessageType::OperationProgress => "operation_progress",
            MessageType::OperationComplete => "operation_complete",
            MessageType::OperationFailed => "operation_failed",
            MessageType::CodeOutput => "code_output",
            MessageType::CodeStatus => "code_status",
            MessageType::CodeDebug => "code_debug",
            MessageType::CodeEvent => "code_event",
            MessageType::ModelStateUpdate => "model_state_update",
            MessageType::StateVerification => "state_verification",
            MessageType::StateConfirmed => "state_confirmed",
            MessageType::SessionInit => "session_init",
            MessageType::Heartbeat => "heartbeat",
            MessageType::Error => "error",
        }
    }

    pub fn from_wire(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|t| t.as_str() == s)
    }

    pub fn category(self) -> Category {
        use MessageType::*;
        match self {
            OperationRequest | OperationAck | OperationStart | OperationProgress
            | OperationComplete | OperationFailed => Category::OperationLifecycle,
            CodeOutput | CodeStatus | CodeDebug | CodeEvent => Category::StreamingOutput,
            ModelStateUpdate | StateVerification | StateConfirmed => Category::StateSync,
            SessionInit | Heartbeat | Error => Category::SessionManagement,
        }
    }

    /// Lifecycle and streaming messages always belong to an operation.
    pub fn requires_operation_id(self) -> bool {
        matches!(
            self.category(),
            Category::OperationLifecycle | Category::StreamingOutput
        )
    }

    /// Status implied by a server-emitted lifecycle message.
    pub fn implied_status(self) -> Option<OperationStatus> {
        match self {
            MessageType::OperationAck => Some(OperationStatus::Acknowledged),
            MessageType::OperationStart => Some(OperationStatus::Started),
            MessageType::OperationProgress => Some(OperationStatus::InProgress),
            MessageType::OperationComplete => Some(OperationStatus::Completed),
            MessageType::OperationFailed => Some(OperationStatus::Failed),
            _ => None,
        }
    }
}

impl fmt::Display for MessageType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperationStatus {
    Pending,
    Acknowledged,
    Started,
    InProgress,
    Completed,
    Failed,
}

impl OperationStatus {
    pub const ALL: [OperationStatus; 6] = [
        OperationStatus::Pending,
        OperationStatus::Acknowledged,
        OperationStatus::Started,
        OperationStatus::InProgress,
        OperationStatus::Completed,
        OperationStatus::Failed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OperationStatus::Pending => "pending",
            OperationStatus::Acknowledged => "acknowledged",
            OperationStatus::Started => "started",
            OperationStatus::InProgress => "in_progress",
            OperationStatus::Completed => "completed",
            OperationStatus::Failed => "failed",
        }
    }

    pub fn from_wire(s: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|t| t.as_str() == s)
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, OperationStatus::Completed | OperationStatus::Failed)
    }
}

impl fmt::Display for OperationStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnhancedMessage {
    pub id: String,
    #[serde(rename = "type")]
    pub kind: MessageType,
    pub payload: Payload,
    pub timestamp: f64,
    pub session_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operation_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<OperationStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind} payload: {detail}")]
pub struct SchemaError {
    pub kind: MessageType,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeFailure {
    NotUtf8,
    MalformedStructure,
    UnknownType,
    SchemaViolation,
}

impl DecodeFailure {
    pub fn as_str(self) -> &'static str {
        match self {
            DecodeFailure::NotUtf8 => "not_utf8",
            DecodeFailure::MalformedStructure => "malformed_structure",
            DecodeFailure::UnknownType => "unknown_type",
            DecodeFailure::SchemaViolation => "schema_violation",
        }
    }
}

impl fmt::Display for DecodeFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("decode failed ({class}): {detail}")]
pub struct DecodeError {
    pub class: DecodeFailure,
    pub detail: String,
}

impl DecodeError {
    fn new(class: DecodeFailure, detail: impl Into<String>) -> Self {
        Self {
            class,
            detail: detail.into(),
        }
    }
}

impl EnhancedMessage {
    /// Unvalidated constructor. Use [`new_message`] for the checked path.
    pub fn raw(id: String, kind: MessageType, payload: Payload, timestamp: f64, session_id: &str) -> Self {
        Self {
            id,
            kind,
            payload,
            timestamp,
            session_id: session_id.to_owned(),
            operation_id: None,
            status: None,
            correlation_id: None,
        }
    }

    pub fn with_operation(mut self, operation_id: impl Into<String>) -> Self {
        self.operation_id = Some(operation_id.into());
        self
    }

    pub fn with_status(mut self, status: OperationStatus) -> Self {
        self.status = Some(status);
        self
    }

    pub fn with_correlation(mut self, correlation_id: impl Into<String>) -> Self {
        self.correlation_id = Some(correlation_id.into());
        self
    }

    pub fn str_field(&self, key: &str) -> Option<&str> {
        self.payload.get(key).and_then(Value::as_str)
    }

    /// Checks the structural invariants and the payload schema of `kind`.
    pub fn validate(&self) -> Result<(), SchemaError> {
        let fail = |detail: String| SchemaError {
            kind: self.kind,
            detail,
        };
        if self.kind.requires_operation_id() && self.operation_id.is_none() {
            return Err(fail("operation_id is required".into()));
        }
        if self.kind.implied_status().is_some() && self.status.is_none() {
            return Err(fail("status is required".into()));
        }
        if !self.timestamp.is_finite() {
            return Err(fail("timestamp must be finite".into()));
        }
        validate_payload(self.kind, &self.payload).map_err(fail)
    }

    pub fn encode(&self) -> Vec<u8> {
        encode_message(self)
    }
}

/// Builds a checked message. Lifecycle responses get their implied status.
pub fn new_message(
    ids: &mut dyn IdGen,
    now: f64,
    kind: MessageType,
    payload: Payload,
    session_id: &str,
    operation_id: Option<&str>,
    correlation_id: Option<&str>,
) -> Result<EnhancedMessage, SchemaError> {
    let mut msg = EnhancedMessage::raw(ids.next_id(), kind, payload, now, session_id);
    msg.operation_id = operation_id.map(ToOwned::to_owned);
    msg.correlation_id = correlation_id.map(ToOwned::to_owned);
    msg.status = kind.implied_status();
    msg.validate()?;
    Ok(msg)
}

pub fn encode_message(msg: &EnhancedMessage) -> Vec<u8> {
    // Serializing a struct of strings, maps and a finite float cannot fail.
    serde_json::to_vec(msg).expect("message serialization is total")
}

pub fn encode_message_str(msg: &EnhancedMessage) -> String {
    serde_json::to_string(msg).expect("message serialization is total")
}

pub fn decode_message(bytes: &[u8]) -> Result<EnhancedMessage, DecodeError> {
    let text = core::str::from_utf8(bytes)
        .map_err(|e| DecodeError::new(DecodeFailure::NotUtf8, e.to_string()))?;
    let value: Value = serde_json::from_str(text)
        .map_err(|e| DecodeError::new(DecodeFailure::MalformedStructure, e.to_string()))?;
    let Value::Object(mut obj) = value else {
        return Err(DecodeError::new(
            DecodeFailure::MalformedStructure,
            "frame is not a JSON object",
        ));
    };

    let kind = match obj.get("type") {
        Some(Value::String(s)) => MessageType::from_wire(s).ok_or_else(|| {
            DecodeError::new(DecodeFailure::UnknownType, format!("unknown message type {s:?}"))
        })?,
        Some(_) => {
            return Err(DecodeError::new(
                DecodeFailure::MalformedStructure,
                "type is not a string",
            ))
        }
        None => return Err(DecodeError::new(DecodeFailure::MalformedStructure, "missing type")),
    };

    let malformed = |field: &str, what: &str| {
        DecodeError::new(
            DecodeFailure::MalformedStructure,
            format!("field {field:?} {what}"),
        )
    };

    let id = match obj.remove("id") {
        Some(Value::String(s)) => s,
        Some(_) => return Err(malformed("id", "is not a string")),
        None => return Err(malformed("id", "is missing")),
    };
    let payload = match obj.remove("payload") {
        Some(Value::Object(m)) => m,
        Some(_) => return Err(malformed("payload", "is not an object")),
        None => return Err(malformed("payload", "is missing")),
    };
    let timestamp = match obj.remove("timestamp") {
        Some(Value::Number(n)) => n.as_f64().ok_or_else(|| malformed("timestamp", "is not a float"))?,
        Some(_) => return Err(malformed("timestamp", "is not a number")),
        None => 0.0,
    };
    let mut opt_string = |field: &str| -> Result<Option<String>, DecodeError> {
        match obj.remove(field) {
            Some(Value::String(s)) => Ok(Some(s)),
            Some(Value::Null) | None => Ok(None),
            Some(_) => Err(malformed(field, "is not a string")),
        }
    };
    let session_id = opt_string("session_id")?.unwrap_or_default();
    let operation_id = opt_string("operation_id")?;
    let correlation_id = opt_string("correlation_id")?;
    let status = match opt_string("status")? {
        Some(s) => Some(OperationStatus::from_wire(&s).ok_or_else(|| {
            DecodeError::new(DecodeFailure::SchemaViolation, format!("unknown status {s:?}"))
        })?),
        None => None,
    };

    let msg = EnhancedMessage {
        id,
        kind,
        payload,
        timestamp,
        session_id,
        operation_id,
        status,
        correlation_id,
    };
    msg.validate()
        .map_err(|e| DecodeError::new(DecodeFailure::SchemaViolation, e.to_string()))?;
    Ok(msg)
}

fn validate_payload(kind: MessageType, payload: &Payload) -> Result<(), String> {
    use MessageType::*;
    match kind {
        OperationRequest => {
            require_str(payload, "operation_type")?;
            require_map(payload, "parameters")
        }
        OperationAck | OperationStart | OperationProgress | Heartbeat => Ok(()),
        OperationComplete => require_map(payload, "result"),
        OperationFailed => require_str(payload, "reason"),
        CodeOutput => {
            require_str(payload, "stdout")?;
            optional_str(payload, "stderr")
        }
        CodeStatus => require_str(payload, "status"),
        CodeDebug => require_str(payload, "detail"),
        CodeEvent => {
            require_str(payload, "event")?;
            require_map(payload, "data")
        }
        ModelStateUpdate => {
            match payload.get("sim_time") {
                Some(v) if number_from_wire(v).is_some() => {}
                _ => return Err("sim_time must be a number".into()),
            }
            let vars = payload
                .get("variables")
                .and_then(Value::as_object)
                .ok_or_else(|| String::from("variables must be a map"))?;
            for (name, series) in vars {
                let ok = series
                    .as_array()
                    .map(|a| a.iter().all(|v| number_from_wire(v).is_some()))
                    .unwrap_or(false);
                if !ok {
                    return Err(format!("variable {name:?} must be a number array"));
                }
            }
            Ok(())
        }
        StateVerification => require_map(payload, "query"),
        StateConfirmed => require_map(payload, "state"),
        SessionInit => {
            require_str(payload, "client")?;
            optional_str(payload, "resume_session_id")
        }
        Error => {
            require_str(payload, "code")?;
            require_str(payload, "message")
        }
    }
}

fn require_str(p: &Payload, key: &str) -> Result<(), String> {
    match p.get(key) {
        Some(Value::String(_)) => Ok(()),
        _ => Err(format!("{key} must be a string")),
    }
}

fn optional_str(p: &Payload, key: &str) -> Result<(), String> {
    match p.get(key) {
        None | Some(Value::String(_)) => Ok(()),
        _ => Err(format!("{key} must be a string when present")),
    }
}

fn require_map(p: &Payload, key: &str) -> Result<(), String> {
    match p.get(key) {
        Some(Value::Object(_)) => Ok(()),
        _ => Err(format!("{key} must be a map")),
    }
}

/// JSON has no NaN or infinities, so non-finite samples travel as the strings
/// `"NaN"`, `"Infinity"` and `"-Infinity"`.
pub fn number_to_wire(x: f64) -> Value {
    if x.is_nan() {
        Value::String("NaN".into())
    } else if x == f64::INFINITY {
        Value::String("Infinity".into())
    } else if x == f64::NEG_INFINITY {
        Value::String("-Infinity".into())
    } else {
        serde_json::Number::from_f64(x)
            .map(Value::Number)
            .expect("finite float")
    }
}

pub fn number_from_wire(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => match s.as_str() {
            "NaN" => Some(f64::NAN),
            "Infinity" => Some(f64::INFINITY),
            "-Infinity" => Some(f64::NEG_INFINITY),
            _ => None,
        },
        _ => None,
    }
}

/// Builds a payload from `(key, value)` pairs.
pub fn payload<I, K>(entries: I) -> Payload
where
    I: IntoIterator<Item = (K, Value)>,
    K: Into<String>,
{
    entries.into_iter().map(|(k, v)| (k.into(), v)).collect()
}
