//! Blocking client driver over an abstract frame transport.

use alloc::boxed::Box;
use alloc::collections::VecDeque;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use serde_json::json;
use thiserror::Error;

use crate::backend::Action;
use crate::message::{decode_message, encode_message, payload, EnhancedMessage, IdGen, MessageType};
use crate::session::{ClientSession, InitOutcome, Route, SessionConfig, SessionError};

pub trait Clock {
    /// Seconds since an arbitrary epoch; never decreases.
    fn now(&self) -> f64;
}

/// Clock advanced by hand; clones share one time.
#[derive(Debug, Clone, Default)]
pub struct ManualClock(Arc<AtomicU64>);

impl ManualClock {
    pub fn new(start: f64) -> Self {
        Self(Arc::new(AtomicU64::new(start.to_bits())))
    }

    pub fn set(&self, t: f64) {
        self.0.store(t.to_bits(), Ordering::SeqCst);
    }

    pub fn advance(&self, dt: f64) -> f64 {
        let t = self.now() + dt;
        self.set(t);
        t
    }
}

impl Clock for ManualClock {
    fn now(&self) -> f64 {
        f64::from_bits(self.0.load(Ordering::SeqCst))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("connection closed")]
    Closed,
    #[error("transport failure: {0}")]
    Io(String),
}

/// Ordered, full-duplex delivery of whole frames.
pub trait Transport {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError>;
    /// Next inbound frame, or `None` once `wait_s` passes without one.
    fn recv(&mut self, wait_s: f64) -> Result<Option<Vec<u8>>, TransportError>;
    /// Opens a fresh connection to the same endpoint.
    fn reconnect(&mut self) -> Result<(), TransportError>;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClientError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("peer silent for {0} s")]
    PeerSilent(f64),
    #[error("no reply to session_init")]
    NoReply,
}

pub struct Client<T, C> {
    transport: T,
    clock: C,
    session: ClientSession,
    pending: VecDeque<EnhancedMessage>,
    audit: Vec<EnhancedMessage>,
    decode_errors: u64,
}

impl<T: Transport, C: Clock> Client<T, C> {
    pub fn new(transport: T, clock: C, config: SessionConfig, name: &str, ids: Box<dyn IdGen + Send>) -> Self {
        Self {
            transport,
            clock,
            session: ClientSession::new(config, name, ids),
            pending: VecDeque::new(),
            audit: Vec::new(),
            decode_errors: 0,
        }
    }

    pub fn session(&self) -> &ClientSession {
        &self.session
    }

    pub fn transport_mut(&mut self) -> &mut T {
        &mut self.transport
    }

    pub fn now(&self) -> f64 {
        self.clock.now()
    }

    pub fn decode_errors(&self) -> u64 {
        self.decode_errors
    }

    /// Every message sent or received so far, in order.
    pub fn audit(&self) -> &[EnhancedMessage] {
        &self.audit
    }

    pub fn take_audit(&mut self) -> Vec<EnhancedMessage> {
        core::mem::take(&mut self.audit)
    }

    fn transmit(&mut self, msg: EnhancedMessage) -> Result<(), ClientError> {
        let bytes = encode_message(&msg);
        self.audit.push(msg);
        match self.transport.send(&bytes) {
            Ok(()) => Ok(()),
            Err(e) => {
                self.session.disconnect();
                Err(e.into())
            }
        }
    }

    fn handshake(&mut self) -> Result<InitOutcome, ClientError> {
        let init = self.session.begin_init(self.clock.now());
        let init_id = init.id.clone();
        self.transmit(init)?;
        let limit = self.session.config().silence_limit_s();
        let mut early = Vec::new();
        let mut waited = 0.0;
        while waited < limit {
            let wait = self.session.config().heartbeat_interval_s;
            match self.transport.recv(wait)? {
                None => waited += wait,
                Some(frame) => {
                    let Ok(msg) = decode_message(&frame) else {
                        self.decode_errors += 1;
                        continue;
                    };
                    self.audit.push(msg.clone());
                    if msg.correlation_id.as_deref() == Some(init_id.as_str()) {
                        let outcome = self.session.complete_init(&msg, self.clock.now())?;
                        for m in early {
                            self.accept(m);
                        }
                        return Ok(outcome);
                    }
                    early.push(msg);
                }
            }
        }
        Err(ClientError::NoReply)
    }

    /// Opens a fresh session.
    pub fn connect(&mut self) -> Result<InitOutcome, ClientError> {
        self.handshake()
    }

    /// Reattaches to the current session on a new connection and flushes
    /// everything queued while disconnected.
    pub fn resume(&mut self) -> Result<InitOutcome, ClientError> {
        self.session.disconnect();
        self.transport.reconnect()?;
        let outcome = self.handshake()?;
        for msg in self.session.drain_outbound() {
            self.transmit(msg)?;
        }
        Ok(outcome)
    }

    /// Marks the session disconnected without touching the transport.
    pub fn mark_disconnected(&mut self) {
        self.session.disconnect();
    }

    fn send_or_queue(&mut self, msg: Option<EnhancedMessage>) -> Result<(), ClientError> {
        match msg {
            Some(m) => self.transmit(m),
            None => Ok(()),
        }
    }

    /// Sends an action; returns the operation id it runs under.
    pub fn dispatch(&mut self, action: &Action) -> Result<String, ClientError> {
        let (op, _, tx) = self.session.request(action, self.clock.now())?;
        self.send_or_queue(tx)?;
        Ok(op)
    }

    /// Requests an interrupt of `operation_id`; returns the request message id.
    pub fn interrupt(&mut self, operation_id: &str) -> Result<String, ClientError> {
        let (_, msg, tx) = self.session.request(&Action::interrupt(operation_id), self.clock.now())?;
        let id = msg.id.clone();
        self.send_or_queue(tx)?;
        Ok(id)
    }

    /// Sends a `state_verification` for the given operations.
    pub fn verify(&mut self, operation_ids: &[&str]) -> Result<String, ClientError> {
        let msg = self.session.verify(operation_ids, self.clock.now()).map_err(SessionError::from)?;
        let id = msg.id.clone();
        let tx = self.session.send(msg)?;
        self.send_or_queue(tx)?;
        Ok(id)
    }

    /// Routes one decoded message; keeps it for the consumer unless it is a
    /// heartbeat or was rejected.
    fn accept(&mut self, msg: EnhancedMessage) {
        match self.session.route(&msg, self.clock.now()) {
            Route::Operation(_) => self.pending.push_back(msg),
            Route::Session => {
                if msg.kind != MessageType::Heartbeat {
                    self.pending.push_back(msg);
                }
            }
            Route::Reject(reply) => {
                let tx = self.session.send(reply).ok().flatten();
                // A failed error reply is not worth surfacing to the consumer.
                let _ = self.send_or_queue(tx);
            }
        }
    }

    fn synthesize_timeouts(&mut self) {
        let now = self.clock.now();
        let swept = self.session.sweep(now);
        for op in swept.timed_out {
            let p = payload([("reason", json!("timeout"))]);
            if let Ok(msg) = self
                .session
                .build(MessageType::OperationFailed, p, Some(&op), None, now)
            {
                self.audit.push(msg.clone());
                self.pending.push_back(msg);
            }
        }
    }

    /// Next message for the consumer: operation traffic, or session-level
    /// errors and state replies. Heartbeats are handled here.
    pub fn next_message(&mut self) -> Result<EnhancedMessage, ClientError> {
        loop {
            if let Some(m) = self.pending.pop_front() {
                return Ok(m);
            }
            let wait = self.session.config().heartbeat_interval_s;
            let frame = match self.transport.recv(wait) {
                Ok(f) => f,
                Err(e) => {
                    self.session.disconnect();
                    return Err(e.into());
                }
            };
            match frame {
                Some(bytes) => match decode_message(&bytes) {
                    Ok(msg) => {
                        self.audit.push(msg.clone());
                        self.accept(msg);
                    }
                    Err(_) => self.decode_errors += 1,
                },
                None => self.synthesize_timeouts(),
            }
            let tick = self.session.heartbeat_tick(self.clock.now());
            if tick.disconnected {
                return Err(ClientError::PeerSilent(self.session.config().silence_limit_s()));
            }
            if let Some(hb) = tick.send {
                self.transmit(hb)?;
            }
        }
    }
}
