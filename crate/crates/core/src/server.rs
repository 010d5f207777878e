//! Server side of the protocol as a sans-IO actor.
//!
//! Frames go in through [`ServerCore::on_frame`], time advances through
//! [`ServerCore::poll`], and everything to send comes out of
//! [`ServerCore::drain`]. Running primitives advance one internal step per
//! poll, and the interrupt flag is checked at each step boundary.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::backend::{
    decode_output_chunk_with_limit, Action, Emission, InstantiateError, Primitive, Registry, StepOutcome,
    DEFAULT_DECODE_FAILURE_LIMIT,
};
use crate::lifecycle::{self, LifecycleEvent, OperationTracker};
use crate::message::{
    decode_message, new_message, payload, EnhancedMessage, IdGen, MessageType, OperationStatus, Payload,
};
use crate::session::SessionConfig;

pub type ConnId = u64;

fn d_decode_limit() -> u32 {
    DEFAULT_DECODE_FAILURE_LIMIT
}
fn d_decimation() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    #[serde(flatten)]
    pub session: SessionConfig,
    /// Consecutive undecodable output chunks before an operation degrades.
    #[serde(default = "d_decode_limit")]
    pub decode_failure_limit: u32,
    /// Forward every n-th trajectory sample.
    #[serde(default = "d_decimation")]
    pub trajectory_decimation: u32,
    /// Step every running operation of a session on each poll instead of one at a time.
    #[serde(default)]
    pub parallel_operations: bool,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            session: SessionConfig::default(),
            decode_failure_limit: d_decode_limit(),
            trajectory_decimation: d_decimation(),
            parallel_operations: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ServerOutput {
    Frame { conn: ConnId, message: EnhancedMessage },
    /// The peer went silent; the transport should drop the connection.
    Close { conn: ConnId },
}

struct Job {
    operation_id: String,
    body: Box<dyn Primitive>,
    steps: u64,
    budget: u64,
    started: bool,
    /// Set by an interrupt request; holds the request id.
    interrupt: Option<String>,
    decode_failures: u32,
    samples: u64,
}

struct ServerSession {
    conn: Option<ConnId>,
    trackers: BTreeMap<String, OperationTracker>,
    queue: VecDeque<EnhancedMessage>,
    jobs: Vec<Job>,
    detached_at: Option<f64>,
    last_peer_seen: f64,
    last_heartbeat_sent: f64,
}

pub struct ServerCore {
    config: ServerConfig,
    registry: Registry,
    ids: Box<dyn IdGen + Send>,
    conns: BTreeMap<ConnId, Option<String>>,
    next_conn: ConnId,
    sessions: BTreeMap<String, ServerSession>,
    outbox: VecDeque<ServerOutput>,
}

impl core::fmt::Debug for ServerCore {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("ServerCore")
            .field("sessions", &self.sessions.keys().collect::<Vec<_>>())
            .field("conns", &self.conns)
            .finish()
    }
}

fn err_payload(code: &str, message: &str) -> Payload {
    payload([("code", json!(code)), ("message", json!(message))])
}

impl ServerCore {
    pub fn new(config: ServerConfig, registry: Registry, ids: Box<dyn IdGen + Send>) -> Self {
        Self {
            config,
            registry,
            ids,
            conns: BTreeMap::new(),
            next_conn: 1,
            sessions: BTreeMap::new(),
            outbox: VecDeque::new(),
        }
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn connect(&mut self) -> ConnId {
        let id = self.next_conn;
        self.next_conn += 1;
        self.conns.insert(id, None);
        id
    }

    /// Detaches the connection's session. Trackers, queued output and running
    /// operations survive until resumed or collected.
    pub fn disconnect(&mut self, conn: ConnId, now: f64) {
        if let Some(Some(sid)) = self.conns.remove(&conn) {
            if let Some(s) = self.sessions.get_mut(&sid) {
                if s.conn == Some(conn) {
                    s.conn = None;
                    s.detached_at = Some(now);
                }
            }
        }
    }

    pub fn session_ids(&self) -> Vec<String> {
        self.sessions.keys().cloned().collect()
    }

    pub fn trackers(&self, session_id: &str) -> Option<&BTreeMap<String, OperationTracker>> {
        self.sessions.get(session_id).map(|s| &s.trackers)
    }

    pub fn queued(&self, session_id: &str) -> usize {
        self.sessions.get(session_id).map_or(0, |s| s.queue.len())
    }

    /// True when some operation could advance on the next poll.
    pub fn has_work(&self) -> bool {
        self.sessions.values().any(|s| !s.jobs.is_empty() && !self.backpressured(s))
    }

    fn backpressured(&self, s: &ServerSession) -> bool {
        s.conn.is_none() && s.queue.len() >= self.config.session.queue_capacity
    }

    pub fn drain(&mut self) -> Vec<ServerOutput> {
        self.outbox.drain(..).collect()
    }

    fn reply(&mut self, conn: ConnId, session_id: &str, kind: MessageType, p: Payload, corr: Option<&str>, now: f64) {
        let msg = new_message(self.ids.as_mut(), now, kind, p, session_id, None, corr).expect("server reply is well-formed");
        self.outbox.push_back(ServerOutput::Frame { conn, message: msg });
    }

    pub fn on_frame(&mut self, conn: ConnId, bytes: &[u8], now: f64) {
        let Some(bound) = self.conns.get(&conn).cloned() else {
            return;
        };
        let sid_for_errors = bound.clone().unwrap_or_default();
        let msg = match decode_message(bytes) {
            Ok(m) => m,
            Err(e) => {
                let p = err_payload("decode_error", &format!("{}: {}", e.class, e.detail));
                self.reply(conn, &sid_for_errors, MessageType::Error, p, None, now);
                return;
            }
        };
        if let Some(sid) = &bound {
            if let Some(s) = self.sessions.get_mut(sid) {
                s.last_peer_seen = s.last_peer_seen.max(now);
            }
        }
        match (msg.kind, bound) {
            (MessageType::SessionInit, None) => self.handle_init(conn, &msg, now),
            (MessageType::SessionInit, Some(sid)) => {
                let p = err_payload("already_initialized", "connection already bound to a session");
                self.reply(conn, &sid, MessageType::Error, p, Some(&msg.id), now);
            }
            (_, None) => {
                let p = err_payload("no_session", "send session_init first");
                self.reply(conn, "", MessageType::Error, p, Some(&msg.id), now);
            }
            (MessageType::Heartbeat | MessageType::Error, Some(_)) => {}
            (MessageType::OperationRequest, Some(sid)) => self.handle_request(&sid, &msg, now),
            (MessageType::StateVerification, Some(sid)) => {
                let wanted: Option<Vec<String>> = msg
                    .payload
                    .get("query")
                    .and_then(|q| q.get("operation_ids"))
                    .and_then(Value::as_array)
                    .map(|a| a.iter().filter_map(|v| v.as_str().map(String::from)).collect());
                let ops = self.status_map(&sid, wanted.as_deref());
                let p = payload([("state", json!({ "session_id": sid, "operations": ops }))]);
                self.reply(conn, &sid, MessageType::StateConfirmed, p, Some(&msg.id), now);
            }
            (_, Some(sid)) => {
                let known = msg
                    .operation_id
                    .as_ref()
                    .is_some_and(|op| self.sessions.get(&sid).is_some_and(|s| s.trackers.contains_key(op)));
                if !known && msg.operation_id.is_some() {
                    let p = err_payload("unknown_operation", "no such operation");
                    self.reply(conn, &sid, MessageType::Error, p, Some(&msg.id), now);
                }
            }
        }
    }

    fn status_map(&self, sid: &str, only: Option<&[String]>) -> Map<String, Value> {
        let Some(s) = self.sessions.get(sid) else {
            return Map::new();
        };
        s.trackers
            .values()
            .filter(|t| only.map_or(true, |o| o.contains(&t.operation_id)))
            .map(|t| (t.operation_id.clone(), json!(t.state().as_str())))
            .collect()
    }

    fn handle_init(&mut self, conn: ConnId, msg: &EnhancedMessage, now: f64) {
        let resume = msg.str_field("resume_session_id").map(String::from);
        let (sid, resumed) = match resume {
            Some(sid) => {
                let Some(s) = self.sessions.get_mut(&sid) else {
                    let p = err_payload("unknown_session", &format!("session {sid} is not live"));
                    self.reply(conn, "", MessageType::Error, p, Some(&msg.id), now);
                    return;
                };
                if let Some(old) = s.conn.replace(conn) {
                    self.conns.remove(&old);
                    self.outbox.push_back(ServerOutput::Close { conn: old });
                }
                s.detached_at = None;
                s.last_peer_seen = now;
                (sid, true)
            }
            None => {
                let sid = self.ids.next_id();
                self.sessions.insert(
                    sid.clone(),
                    ServerSession {
                        conn: Some(conn),
                        trackers: BTreeMap::new(),
                        queue: VecDeque::new(),
                        jobs: Vec::new(),
                        detached_at: None,
                        last_peer_seen: now,
                        last_heartbeat_sent: now,
                    },
                );
                (sid, false)
            }
        };
        self.conns.insert(conn, Some(sid.clone()));
        let ops = self.status_map(&sid, None);
        let p = payload([(
            "state",
            json!({"session_id": sid, "resumed": resumed, "operations": ops}),
        )]);
        self.reply(conn, &sid, MessageType::StateConfirmed, p, Some(&msg.id), now);
        let s = self.sessions.get_mut(&sid).expect("bound above");
        for m in s.queue.drain(..) {
            self.outbox.push_back(ServerOutput::Frame { conn, message: m });
        }
    }

    fn handle_request(&mut self, sid: &str, msg: &EnhancedMessage, now: f64) {
        let conn = self.sessions[sid].conn.expect("request arrives on a bound connection");
        let op = msg.operation_id.clone().unwrap_or_default();
        let action = match Action::from_request_payload(&msg.payload) {
            Ok(a) => a,
            Err(e) => {
                let p = err_payload("bad_request", &e.to_string());
                self.reply(conn, sid, MessageType::Error, p, Some(&msg.id), now);
                return;
            }
        };
        match action {
            Action::ControlCommand {
                target_operation_id, ..
            } => {
                let s = self.sessions.get_mut(sid).expect("bound session");
                match s
                    .jobs
                    .iter_mut()
                    .find(|j| j.operation_id == target_operation_id && j.interrupt.is_none())
                {
                    Some(job) => job.interrupt = Some(msg.id.clone()),
                    None => {
                        let p = err_payload(
                            "not_interruptible",
                            &format!("operation {target_operation_id} is not running"),
                        );
                        self.reply(conn, sid, MessageType::Error, p, Some(&msg.id), now);
                    }
                }
            }
            Action::PrimitiveCall { primitive, parameters } => {
                if self.sessions[sid].trackers.contains_key(&op) {
                    let p = err_payload("duplicate_operation", &format!("operation {op} already exists"));
                    self.reply(conn, sid, MessageType::Error, p, Some(&msg.id), now);
                    return;
                }
                let timeout = self.config.session.operation_timeout_s;
                let s = self.sessions.get_mut(sid).expect("bound session");
                s.trackers.insert(op.clone(), OperationTracker::new(op.clone(), now, timeout));
                self.lifecycle(sid, &op, LifecycleEvent::Ack, Payload::new(), Some(&msg.id), now);
                match self.registry.instantiate(&primitive, &parameters) {
                    Ok((body, budget)) => {
                        let s = self.sessions.get_mut(sid).expect("bound session");
                        s.jobs.push(Job {
                            operation_id: op,
                            body,
                            steps: 0,
                            budget,
                            started: false,
                            interrupt: None,
                            decode_failures: 0,
                            samples: 0,
                        });
                    }
                    Err(e) => {
                        let reason = match &e {
                            InstantiateError::Unknown => "unknown_primitive".to_string(),
                            other => other.to_string(),
                        };
                        self.lifecycle(sid, &op, LifecycleEvent::Start, Payload::new(), None, now);
                        let p = payload([("reason", json!(reason))]);
                        self.lifecycle(sid, &op, LifecycleEvent::Error, p, None, now);
                    }
                }
            }
        }
    }

    /// Applies a lifecycle event to the tracker and emits its message.
    fn lifecycle(&mut self, sid: &str, op: &str, event: LifecycleEvent, p: Payload, corr: Option<&str>, now: f64) {
        let kind = match event {
            LifecycleEvent::Ack => MessageType::OperationAck,
            LifecycleEvent::Start => MessageType::OperationStart,
            LifecycleEvent::Progress => MessageType::OperationProgress,
            LifecycleEvent::Done => MessageType::OperationComplete,
            LifecycleEvent::Error | LifecycleEvent::Timeout | LifecycleEvent::InterruptAck => {
                MessageType::OperationFailed
            }
        };
        let s = self.sessions.get_mut(sid).expect("live session");
        if let Some(t) = s.trackers.get_mut(op) {
            // Every caller follows the edge list; a refusal here is a bug.
            t.apply(event, now).expect("server lifecycle follows the status machine");
        }
        self.emit(sid, kind, p, Some(op), corr, now);
    }

    fn emit(&mut self, sid: &str, kind: MessageType, p: Payload, op: Option<&str>, corr: Option<&str>, now: f64) {
        let mut msg = new_message(self.ids.as_mut(), now, kind, p, sid, op, corr).expect("server emission is well-formed");
        let s = self.sessions.get_mut(sid).expect("live session");
        if let Some(t) = op.and_then(|op| s.trackers.get_mut(op)) {
            if msg.status.is_none() && t.state() == OperationStatus::InProgress {
                msg.status = Some(OperationStatus::InProgress);
            }
        }
        match s.conn {
            Some(conn) => self.outbox.push_back(ServerOutput::Frame { conn, message: msg }),
            None => s.queue.push_back(msg),
        }
    }

    /// Streams one observation message for a running operation.
    fn stream(&mut self, sid: &str, op: &str, kind: MessageType, p: Payload, now: f64) {
        let s = self.sessions.get_mut(sid).expect("live session");
        if let Some(t) = s.trackers.get_mut(op) {
            if t.state() == OperationStatus::Started {
                t.apply(LifecycleEvent::Progress, now).expect("started -> in_progress");
            } else {
                t.touch(now);
            }
        }
        self.emit(sid, kind, p, Some(op), None, now);
    }

    /// Advances time: heartbeats, one step per runnable operation, timeouts,
    /// then tracker and session collection.
    pub fn poll(&mut self, now: f64) {
        let sids: Vec<String> = self.sessions.keys().cloned().collect();
        for sid in &sids {
            self.heartbeat(sid, now);
            self.run_jobs(sid, now);
            self.sweep(sid, now);
        }
        let horizon = self.config.session.operation_timeout_s + self.config.session.gc_delta_s;
        self.sessions
            .retain(|_, s| s.detached_at.map_or(true, |t| now - t <= horizon));
    }

    fn heartbeat(&mut self, sid: &str, now: f64) {
        let cfg = &self.config.session;
        let (interval, limit) = (cfg.heartbeat_interval_s, cfg.silence_limit_s());
        let s = self.sessions.get_mut(sid).expect("live session");
        let Some(conn) = s.conn else { return };
        if now - s.last_peer_seen >= limit {
            self.outbox.push_back(ServerOutput::Close { conn });
            self.disconnect(conn, now);
            return;
        }
        if now - s.last_heartbeat_sent >= interval {
            s.last_heartbeat_sent = now;
            self.emit(sid, MessageType::Heartbeat, Payload::new(), None, None, now);
        }
    }

    fn run_jobs(&mut self, sid: &str, now: f64) {
        if self.backpressured(&self.sessions[sid]) {
            return;
        }
        let runnable = if self.config.parallel_operations {
            self.sessions[sid].jobs.len()
        } else {
            self.sessions[sid].jobs.len().min(1)
        };
        let mut jobs = core::mem::take(&mut self.sessions.get_mut(sid).expect("live").jobs);
        let mut ended = Vec::new();
        for (i, job) in jobs.iter_mut().enumerate().take(runnable) {
            if self.step_job(sid, job, now) {
                ended.push(i);
            }
        }
        for i in ended.into_iter().rev() {
            jobs.remove(i);
        }
        self.sessions.get_mut(sid).expect("live").jobs = jobs;
    }

    /// One step boundary of one job. Returns true when the job has ended.
    fn step_job(&mut self, sid: &str, job: &mut Job, now: f64) -> bool {
        let op = job.operation_id.clone();
        if !job.started {
            job.started = true;
            self.lifecycle(sid, &op, LifecycleEvent::Start, Payload::new(), None, now);
        }
        if let Some(req) = job.interrupt.clone() {
            let p = payload([("reason", json!("interrupted"))]);
            self.lifecycle(sid, &op, LifecycleEvent::InterruptAck, p, Some(&req), now);
            return true;
        }
        if job.steps >= job.budget {
            let p = payload([("reason", json!("step_budget"))]);
            self.lifecycle(sid, &op, LifecycleEvent::Error, p, None, now);
            return true;
        }
        let mut out = Vec::new();
        let result = job.body.step(&mut out);
        job.steps += 1;
        for e in out {
            match e {
                Emission::RawOutput(bytes) => {
                    let (text, failures, degrade) =
                        decode_output_chunk_with_limit(&bytes, job.decode_failures, self.config.decode_failure_limit);
                    job.decode_failures = failures;
                    if let Some(text) = text {
                        self.stream(sid, &op, MessageType::CodeOutput, payload([("stdout", json!(text))]), now);
                    }
                    if degrade {
                        let p = payload([
                            ("event", json!("encoding_degraded")),
                            ("data", json!({ "consecutive_failures": failures })),
                        ]);
                        self.stream(sid, &op, MessageType::CodeEvent, p, now);
                        let p = payload([("result", json!({"partial": true}))]);
                        self.lifecycle(sid, &op, LifecycleEvent::Done, p, None, now);
                        return true;
                    }
                }
                Emission::State { .. } => {
                    job.samples += 1;
                    let k = u64::from(self.config.trajectory_decimation.max(1));
                    if (job.samples - 1) % k == 0 {
                        let (kind, p) = e.to_payload().expect("state emission has a payload");
                        self.stream(sid, &op, kind, p, now);
                    }
                }
                other => {
                    let (kind, p) = other.to_payload().expect("non-raw emission has a payload");
                    self.stream(sid, &op, kind, p, now);
                }
            }
        }
        match result {
            Ok(StepOutcome::Continue) => false,
            Ok(StepOutcome::Done(r)) => {
                let p = payload([("result", Value::Object(r))]);
                self.lifecycle(sid, &op, LifecycleEvent::Done, p, None, now);
                true
            }
            Err(reason) => {
                let p = payload([("reason", json!(reason))]);
                self.lifecycle(sid, &op, LifecycleEvent::Error, p, None, now);
                true
            }
        }
    }

    fn sweep(&mut self, sid: &str, now: f64) {
        let delta = self.config.session.gc_delta_s;
        let s = self.sessions.get_mut(sid).expect("live session");
        let swept = lifecycle::sweep(&mut s.trackers, now, delta);
        for op in &swept.timed_out {
            s.jobs.retain(|j| &j.operation_id != op);
        }
        for op in &swept.removed {
            s.jobs.retain(|j| &j.operation_id != op);
        }
        for op in swept.timed_out {
            // The tracker already carries the failure; emitting must not move its clock.
            let p = payload([("reason", json!("timeout"))]);
            let msg = new_message(self.ids.as_mut(), now, MessageType::OperationFailed, p, sid, Some(&op), None)
                .expect("timeout message is well-formed");
            let s = self.sessions.get_mut(sid).expect("live session");
            match s.conn {
                Some(conn) => self.outbox.push_back(ServerOutput::Frame { conn, message: msg }),
                None => s.queue.push_back(msg),
            }
        }
    }
}
