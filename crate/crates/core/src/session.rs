//! Client side of a session: trackers, outbound queue, routing, heartbeat
//! and resume, with no IO of its own.

use alloc::borrow::ToOwned;
use alloc::boxed::Box;
use alloc::collections::{BTreeMap, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::backend::Action;
use crate::lifecycle::{self, LifecycleEvent, OperationTracker, DEFAULT_GC_DELTA_S, DEFAULT_OPERATION_TIMEOUT_S};
use crate::message::{new_message, Category, EnhancedMessage, IdGen, MessageType, OperationStatus, Payload, SchemaError};

fn d_heartbeat() -> f64 {
    15.0
}
fn d_missed() -> u32 {
    3
}
fn d_timeout() -> f64 {
    DEFAULT_OPERATION_TIMEOUT_S
}
fn d_gc() -> f64 {
    DEFAULT_GC_DELTA_S
}
fn d_capacity() -> usize {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    #[serde(default = "d_heartbeat")]
    pub heartbeat_interval_s: f64,
    #[serde(default = "d_missed")]
    pub missed_heartbeats_to_disconnect: u32,
    #[serde(default = "d_timeout")]
    pub operation_timeout_s: f64,
    #[serde(default = "d_gc")]
    pub gc_delta_s: f64,
    #[serde(default = "d_capacity")]
    pub queue_capacity: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            heartbeat_interval_s: d_heartbeat(),
            missed_heartbeats_to_disconnect: d_missed(),
            operation_timeout_s: d_timeout(),
            gc_delta_s: d_gc(),
            queue_capacity: d_capacity(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid session config: {0}")]
pub struct ConfigError(pub String);

impl SessionConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ConfigError(format!("{name} must be positive")))
            }
        };
        positive("heartbeat_interval_s", self.heartbeat_interval_s)?;
        positive("operation_timeout_s", self.operation_timeout_s)?;
        positive("gc_delta_s", self.gc_delta_s)?;
        if self.missed_heartbeats_to_disconnect == 0 {
            return Err(ConfigError("missed_heartbeats_to_disconnect must be positive".into()));
        }
        if self.queue_capacity == 0 {
            return Err(ConfigError("queue_capacity must be positive".into()));
        }
        Ok(())
    }

    /// Silence after which the peer is declared gone.
    pub fn silence_limit_s(&self) -> f64 {
        self.heartbeat_interval_s * self.missed_heartbeats_to_disconnect as f64
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SessionError {
    #[error("outbound queue full ({capacity} messages)")]
    Backpressure { capacity: usize },
    #[error("server error {code}: {message}")]
    Server { code: String, message: String },
    #[error("unexpected reply to session_init: {0}")]
    UnexpectedReply(String),
    #[error("no session_init in flight")]
    NotInitializing,
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

/// Where an inbound message goes.
#[derive(Debug, Clone, PartialEq)]
pub enum Route {
    /// The observer stream of one operation.
    Operation(String),
    /// Session-level handling (heartbeat, errors without an operation, state replies).
    Session,
    /// Dropped; the enclosed reply goes back to the peer.
    Reject(EnhancedMessage),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeartbeatTick {
    pub send: Option<EnhancedMessage>,
    pub disconnected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitOutcome {
    pub session_id: String,
    pub resumed: bool,
    /// Server-side status of every operation it still tracks.
    pub server_operations: BTreeMap<String, String>,
    /// Local non-terminal operations the server no longer knows.
    pub lost_operations: Vec<String>,
}

/// Lifecycle event implied by an inbound operation message, given the
/// tracker's current state. Streaming output counts as progress.
pub fn lifecycle_event(msg: &EnhancedMessage, state: OperationStatus) -> Option<LifecycleEvent> {
    let kind = msg.kind;
    match kind {
        MessageType::OperationAck => Some(LifecycleEvent::Ack),
        MessageType::OperationStart => Some(LifecycleEvent::Start),
        MessageType::OperationProgress => Some(LifecycleEvent::Progress),
        MessageType::OperationComplete => Some(LifecycleEvent::Done),
        MessageType::OperationFailed => Some(match msg.str_field("reason") {
            Some("interrupted") => LifecycleEvent::InterruptAck,
            Some("timeout") => LifecycleEvent::Timeout,
            _ => LifecycleEvent::Error,
        }),
        _ if kind.category() == Category::StreamingOutput && state == OperationStatus::Started => {
            Some(LifecycleEvent::Progress)
        }
        _ => None,
    }
}

pub struct ClientSession {
    config: SessionConfig,
    client_name: String,
    session_id: Option<String>,
    connected: bool,
    trackers: BTreeMap<String, OperationTracker>,
    outbound: VecDeque<EnhancedMessage>,
    last_peer_seen: f64,
    last_heartbeat_sent: f64,
    pending_init: Option<String>,
    ids: Box<dyn IdGen + Send>,
}

impl core::fmt::Debug for ClientSession {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("ClientSession")
            .field("session_id", &self.session_id)
            .field("connected", &self.connected)
            .field("trackers", &self.trackers.len())
            .field("outbound", &self.outbound.len())
            .finish()
    }
}

impl ClientSession {
    pub fn new(config: SessionConfig, client_name: &str, ids: Box<dyn IdGen + Send>) -> Self {
        Self {
            config,
            client_name: client_name.to_owned(),
            session_id: None,
            connected: false,
            trackers: BTreeMap::new(),
            outbound: VecDeque::new(),
            last_peer_seen: 0.0,
            last_heartbeat_sent: 0.0,
            pending_init: None,
            ids,
        }
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn session_id(&self) -> Option<&str> {
        self.session_id.as_deref()
    }

    pub fn is_connected(&self) -> bool {
        self.connected
    }

    pub fn trackers(&self) -> &BTreeMap<String, OperationTracker> {
        &self.trackers
    }

    pub fn tracker(&self, operation_id: &str) -> Option<&OperationTracker> {
        self.trackers.get(operation_id)
    }

    pub fn queued(&self) -> usize {
        self.outbound.len()
    }

    pub fn build(
        &mut self,
        kind: MessageType,
        payload: Payload,
        operation_id: Option<&str>,
        correlation_id: Option<&str>,
        now: f64,
    ) -> Result<EnhancedMessage, SchemaError> {
        let sid = self.session_id.clone().unwrap_or_default();
        new_message(self.ids.as_mut(), now, kind, payload, &sid, operation_id, correlation_id)
    }

    /// `session_init` for a fresh session, or a resume of the current one.
    pub fn begin_init(&mut self, now: f64) -> EnhancedMessage {
        let mut p = Payload::new();
        p.insert("client".into(), Value::String(self.client_name.clone()));
        if let Some(sid) = &self.session_id {
            p.insert("resume_session_id".into(), Value::String(sid.clone()));
        }
        let msg = self
            .build(MessageType::SessionInit, p, None, None, now)
            .expect("session_init payload is well-formed");
        self.pending_init = Some(msg.id.clone());
        msg
    }

    pub fn complete_init(&mut self, reply: &EnhancedMessage, now: f64) -> Result<InitOutcome, SessionError> {
        if self.pending_init.is_none() {
            return Err(SessionError::NotInitializing);
        }
        match reply.kind {
            MessageType::StateConfirmed => {
                let state = reply.payload.get("state").and_then(Value::as_object);
                let sid = state
                    .and_then(|s| s.get("session_id"))
                    .and_then(Value::as_str)
                    .ok_or_else(|| SessionError::UnexpectedReply("state.session_id missing".into()))?
                    .to_owned();
                let resumed = state.and_then(|s| s.get("resumed")).and_then(Value::as_bool).unwrap_or(false);
                let server_operations: BTreeMap<String, String> = state
                    .and_then(|s| s.get("operations"))
                    .and_then(Value::as_object)
                    .map(|m| {
                        m.iter()
                            .map(|(k, v)| (k.clone(), v.as_str().unwrap_or("").to_owned()))
                            .collect()
                    })
                    .unwrap_or_default();
                // Requests still waiting in the outbound queue are not lost, just unsent.
                let unsent: Vec<&str> = self
                    .outbound
                    .iter()
                    .filter(|m| m.kind == MessageType::OperationRequest)
                    .filter_map(|m| m.operation_id.as_deref())
                    .collect();
                let lost_operations = self
                    .trackers
                    .values()
                    .filter(|t| !t.is_terminal() && !server_operations.contains_key(&t.operation_id))
                    .filter(|t| !unsent.contains(&t.operation_id.as_str()))
                    .map(|t| t.operation_id.clone())
                    .collect();
                self.pending_init = None;
                self.session_id = Some(sid.clone());
                self.connected = true;
                self.last_peer_seen = now;
                self.last_heartbeat_sent = now;
                Ok(InitOutcome {
                    session_id: sid,
                    resumed,
                    server_operations,
                    lost_operations,
                })
            }
            MessageType::Error => {
                self.pending_init = None;
                Err(SessionError::Server {
                    code: reply.str_field("code").unwrap_or("").to_owned(),
                    message: reply.str_field("message").unwrap_or("").to_owned(),
                })
            }
            other => Err(SessionError::UnexpectedReply(other.to_string())),
        }
    }

    /// `Some(msg)` to transmit now; `None` when queued for the next resume.
    pub fn send(&mut self, msg: EnhancedMessage) -> Result<Option<EnhancedMessage>, SessionError> {
        if self.connected {
            return Ok(Some(msg));
        }
        if self.outbound.len() >= self.config.queue_capacity {
            return Err(SessionError::Backpressure {
                capacity: self.config.queue_capacity,
            });
        }
        self.outbound.push_back(msg);
        Ok(None)
    }

    /// Builds the `operation_request` for `action` and registers a tracker for
    /// new primitive calls. Control commands address their target's id.
    pub fn request(
        &mut self,
        action: &Action,
        now: f64,
    ) -> Result<(String, EnhancedMessage, Option<EnhancedMessage>), SessionError> {
        let (op_id, tracked) = match action {
            Action::PrimitiveCall { .. } => (self.ids.next_id(), true),
            Action::ControlCommand {
                target_operation_id, ..
            } => (target_operation_id.clone(), false),
        };
        let msg = self.build(MessageType::OperationRequest, action.to_request_payload(), Some(&op_id), None, now)?;
        if tracked {
            self.trackers
                .insert(op_id.clone(), OperationTracker::new(op_id.clone(), now, self.config.operation_timeout_s));
        }
        match self.send(msg.clone()) {
            Ok(tx) => Ok((op_id, msg, tx)),
            Err(e) => {
                if tracked {
                    self.trackers.remove(&op_id);
                }
                Err(e)
            }
        }
    }

    /// Takes every queued message, oldest first.
    pub fn drain_outbound(&mut self) -> Vec<EnhancedMessage> {
        self.outbound.drain(..).collect()
    }

    pub fn route(&mut self, msg: &EnhancedMessage, now: f64) -> Route {
        self.last_peer_seen = self.last_peer_seen.max(now);
        let per_operation = matches!(
            msg.kind.category(),
            Category::OperationLifecycle | Category::StreamingOutput
        ) || (msg.kind == MessageType::Error && msg.operation_id.is_some());
        if !per_operation {
            if msg.kind == MessageType::StateConfirmed {
                if let Some(corr) = &msg.correlation_id {
                    for t in self.trackers.values_mut() {
                        t.pending_verifications.retain(|v| v != corr);
                    }
                }
            }
            return Route::Session;
        }
        let Some(op) = msg.operation_id.as_deref() else {
            return Route::Session;
        };
        match self.trackers.get_mut(op) {
            Some(t) => {
                if let Some(ev) = lifecycle_event(msg, t.state()) {
                    // Late or duplicate lifecycle messages leave the tracker as is.
                    let _ = t.apply(ev, now);
                } else {
                    t.touch(now);
                }
                Route::Operation(op.to_owned())
            }
            None => {
                let p = crate::message::payload([
                    ("code", json!("unknown_operation")),
                    ("message", json!(format!("no operation {op}"))),
                ]);
                let reply = self
                    .build(MessageType::Error, p, None, Some(&msg.id), now)
                    .expect("error payload is well-formed");
                Route::Reject(reply)
            }
        }
    }

    /// Heartbeat to send, and whether the peer has been silent too long.
    pub fn heartbeat_tick(&mut self, now: f64) -> HeartbeatTick {
        let mut tick = HeartbeatTick::default();
        if !self.connected {
            return tick;
        }
        if now - self.last_peer_seen >= self.config.silence_limit_s() {
            self.connected = false;
            tick.disconnected = true;
            return tick;
        }
        if now - self.last_heartbeat_sent >= self.config.heartbeat_interval_s {
            self.last_heartbeat_sent = now;
            tick.send = self.build(MessageType::Heartbeat, Payload::new(), None, None, now).ok();
        }
        tick
    }

    /// Marks the connection down. Trackers and the queue survive.
    pub fn disconnect(&mut self) {
        self.connected = false;
    }

    /// Local timeout and GC pass over the trackers.
    pub fn sweep(&mut self, now: f64) -> lifecycle::Sweep {
        lifecycle::sweep(&mut self.trackers, now, self.config.gc_delta_s)
    }

    /// `state_verification` for the given operations.
    pub fn verify(&mut self, operation_ids: &[&str], now: f64) -> Result<EnhancedMessage, SchemaError> {
        let p = crate::message::payload([("query", json!({ "operation_ids": operation_ids }))]);
        let msg = self.build(MessageType::StateVerification, p, None, None, now)?;
        for op in operation_ids {
            if let Some(t) = self.trackers.get_mut(*op) {
                t.pending_verifications.push(msg.id.clone());
            }
        }
        Ok(msg)
    }
}
