//! In-process transport: the server core runs inside the client's receive
//! calls, driven by a shared manual clock. Same framing and ordering as a
//! socket, fully deterministic.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use crate::client::{Clock, ManualClock, Transport, TransportError};
use crate::message::encode_message;
use crate::server::{ConnId, ServerCore, ServerOutput};

pub const DEFAULT_TICK_S: f64 = 1e-3;

#[derive(Debug)]
pub struct Loopback {
    server: ServerCore,
    clock: ManualClock,
    conn: Option<ConnId>,
    inbox: VecDeque<Vec<u8>>,
    tick_s: f64,
}

impl Loopback {
    pub fn new(mut server: ServerCore, clock: ManualClock) -> Self {
        let conn = Some(server.connect());
        Self {
            server,
            clock,
            conn,
            inbox: VecDeque::new(),
            tick_s: DEFAULT_TICK_S,
        }
    }

    /// Simulated time that passes per server poll.
    pub fn with_tick(mut self, tick_s: f64) -> Self {
        self.tick_s = tick_s;
        self
    }

    pub fn server(&self) -> &ServerCore {
        &self.server
    }

    pub fn server_mut(&mut self) -> &mut ServerCore {
        &mut self.server
    }

    pub fn is_open(&self) -> bool {
        self.conn.is_some()
    }

    /// Drops the connection as a network fault would. Frames already
    /// delivered stay readable.
    pub fn drop_connection(&mut self) {
        if let Some(c) = self.conn.take() {
            self.server.disconnect(c, self.clock.now());
        }
    }

    /// One server poll at the current time plus `dt`.
    pub fn poll(&mut self, dt: f64) {
        let now = self.clock.advance(dt);
        self.server.poll(now);
        self.collect();
    }

    fn collect(&mut self) {
        for out in self.server.drain() {
            match out {
                ServerOutput::Frame { conn, message } if Some(conn) == self.conn => {
                    self.inbox.push_back(encode_message(&message));
                }
                ServerOutput::Close { conn } if Some(conn) == self.conn => {
                    self.conn = None;
                }
                _ => {}
            }
        }
    }
}

impl Transport for Loopback {
    fn send(&mut self, frame: &[u8]) -> Result<(), TransportError> {
        let conn = self.conn.ok_or(TransportError::Closed)?;
        self.server.on_frame(conn, frame, self.clock.now());
        self.collect();
        Ok(())
    }

    fn recv(&mut self, wait_s: f64) -> Result<Option<Vec<u8>>, TransportError> {
        if let Some(f) = self.inbox.pop_front() {
            return Ok(Some(f));
        }
        if self.conn.is_none() {
            return Err(TransportError::Closed);
        }
        let mut waited = 0.0;
        while self.server.has_work() && waited < wait_s {
            self.poll(self.tick_s);
            waited += self.tick_s;
            if let Some(f) = self.inbox.pop_front() {
                return Ok(Some(f));
            }
        }
        if waited < wait_s {
            self.poll(wait_s - waited);
        }
        match self.inbox.pop_front() {
            Some(f) => Ok(Some(f)),
            None if self.conn.is_none() => Err(TransportError::Closed),
            None => Ok(None),
        }
    }

    fn reconnect(&mut self) -> Result<(), TransportError> {
        self.drop_connection();
        self.conn = Some(self.server.connect());
        Ok(())
    }
}
