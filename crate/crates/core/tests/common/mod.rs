#![allow(dead_code)]

use embsync_core::backend::builtin_registry;
use embsync_core::backend::{Emission, ParamKind, ParamSpec, Primitive, PrimitiveSpec, Registry, StepOutcome};
use embsync_core::client::{Client, ManualClock};
use embsync_core::loopback::Loopback;
use embsync_core::message::{decode_message, encode_message, payload, EnhancedMessage, MessageType, Payload, SequentialIds};
use embsync_core::server::{ConnId, ServerConfig, ServerCore, ServerOutput};
use serde_json::{json, Value};

pub type LoopClient = Client<Loopback, ManualClock>;

/// Never finishes and never says anything.
struct Stall;

impl Primitive for Stall {
    fn step(&mut self, _out: &mut Vec<Emission>) -> Result<StepOutcome, String> {
        Ok(StepOutcome::Continue)
    }
}

/// Emits the given raw chunks, one per step, then completes.
struct Chunks(std::vec::IntoIter<Vec<u8>>);

impl Primitive for Chunks {
    fn step(&mut self, out: &mut Vec<Emission>) -> Result<StepOutcome, String> {
        match self.0.next() {
            Some(c) => {
                out.push(Emission::RawOutput(c));
                Ok(StepOutcome::Continue)
            }
            None => Ok(StepOutcome::Done(payload([("partial", json!(false))]))),
        }
    }
}

/// Builtins plus `stall` and `raw_chunks` (chunks: array of byte arrays).
pub fn test_registry() -> Registry {
    let mut r = builtin_registry();
    r.register(
        PrimitiveSpec {
            name: "stall".into(),
            params: vec![],
            emits_trajectory: false,
            step_budget: u64::MAX,
        },
        Box::new(|_| Ok(Box::new(Stall) as Box<dyn Primitive>)),
    )
    .unwrap();
    r.register(
        PrimitiveSpec {
            name: "raw_chunks".into(),
            params: vec![ParamSpec::required("chunks", ParamKind::Array, "")],
            emits_trajectory: false,
            step_budget: 1000,
        },
        Box::new(|a: &Payload| {
            let chunks: Vec<Vec<u8>> = a["chunks"]
                .as_array()
                .unwrap()
                .iter()
                .map(|c| c.as_array().unwrap().iter().map(|b| b.as_u64().unwrap() as u8).collect())
                .collect();
            Ok(Box::new(Chunks(chunks.into_iter())) as Box<dyn Primitive>)
        }),
    )
    .unwrap();
    r
}

pub fn server(config: ServerConfig) -> ServerCore {
    ServerCore::new(config, test_registry(), Box::new(SequentialIds::new("s")))
}

pub fn loop_client_with(config: ServerConfig) -> (LoopClient, ManualClock) {
    let clock = ManualClock::new(0.0);
    let session = config.session.clone();
    let transport = Loopback::new(server(config), clock.clone());
    let client = Client::new(transport, clock.clone(), session, "test", Box::new(SequentialIds::new("c")));
    (client, clock)
}

pub fn loop_client() -> (LoopClient, ManualClock) {
    let (mut c, clock) = loop_client_with(ServerConfig::default());
    c.connect().unwrap();
    (c, clock)
}

pub fn obj(v: Value) -> Payload {
    match v {
        Value::Object(m) => m,
        _ => panic!("not an object"),
    }
}

pub fn is_terminal(m: &EnhancedMessage) -> bool {
    matches!(m.kind, MessageType::OperationComplete | MessageType::OperationFailed)
}

/// Messages for `op` up to and including its terminal one.
pub fn collect_until_terminal(c: &mut LoopClient, op: &str) -> Vec<EnhancedMessage> {
    let mut out = Vec::new();
    loop {
        let m = c.next_message().unwrap();
        if m.operation_id.as_deref() != Some(op) {
            continue;
        }
        let end = is_terminal(&m);
        out.push(m);
        if end {
            return out;
        }
    }
}

/// Hand-driven server with one raw connection.
pub struct Harness {
    pub core: ServerCore,
    pub conn: ConnId,
    pub now: f64,
    pub seq: u64,
    pub session_id: String,
}

impl Harness {
    pub fn new(config: ServerConfig) -> Self {
        let mut core = server(config);
        let conn = core.connect();
        let mut h = Self {
            core,
            conn,
            now: 0.0,
            seq: 0,
            session_id: String::new(),
        };
        let init = h.frame("session_init", json!({"client": "harness"}), None);
        h.send(&init);
        let out = h.frames();
        h.session_id = out[0].payload["state"]["session_id"].as_str().unwrap().to_owned();
        h
    }

    pub fn frame(&mut self, kind: &str, p: Value, op: Option<&str>) -> Vec<u8> {
        self.seq += 1;
        let mut v = json!({
            "id": format!("h-{}", self.seq),
            "type": kind,
            "payload": p,
            "timestamp": self.now,
            "session_id": self.session_id,
        });
        if let Some(op) = op {
            v["operation_id"] = json!(op);
        }
        serde_json::to_vec(&v).unwrap()
    }

    pub fn send(&mut self, bytes: &[u8]) {
        self.core.on_frame(self.conn, bytes, self.now);
    }

    pub fn request(&mut self, op: &str, primitive: &str, params: Value) -> String {
        let f = self.frame(
            "operation_request",
            json!({"operation_type": "execute_primitive", "parameters": {"primitive": primitive, "args": params}}),
            Some(op),
        );
        self.send(&f);
        format!("h-{}", self.seq)
    }

    pub fn interrupt(&mut self, target: &str) -> String {
        let f = self.frame(
            "operation_request",
            json!({"operation_type": "interrupt", "parameters": {"target_operation_id": target}}),
            Some(target),
        );
        self.send(&f);
        format!("h-{}", self.seq)
    }

    pub fn heartbeat(&mut self) {
        let f = self.frame("heartbeat", json!({}), None);
        self.send(&f);
    }

    pub fn poll_at(&mut self, t: f64) {
        self.now = t;
        self.core.poll(t);
    }

    /// Outputs drained so far, decoded through the wire format.
    pub fn outputs(&mut self) -> Vec<ServerOutput> {
        self.core.drain()
    }

    pub fn frames(&mut self) -> Vec<EnhancedMessage> {
        self.core
            .drain()
            .into_iter()
            .filter_map(|o| match o {
                ServerOutput::Frame { message, .. } => Some(decode_message(&encode_message(&message)).unwrap()),
                ServerOutput::Close { .. } => None,
            })
            .collect()
    }

    /// Polls in `dt` steps until `t`, keeping the connection alive.
    pub fn run_until(&mut self, t: f64, dt: f64) -> Vec<EnhancedMessage> {
        let mut out = Vec::new();
        let mut last_hb = self.now;
        while self.now + dt <= t + 1e-12 {
            let next = self.now + dt;
            if next - last_hb >= 10.0 {
                self.now = next;
                self.heartbeat();
                last_hb = next;
            }
            self.poll_at(next);
            out.extend(self.frames());
        }
        out
    }
}

pub fn kinds(ms: &[EnhancedMessage]) -> Vec<&'static str> {
    ms.iter().map(|m| m.kind.as_str()).collect()
}
