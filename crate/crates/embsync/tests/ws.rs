use std::time::{Duration, Instant};

use embsync::clock::SystemClock;
use embsync::ids::SeededIds;
use embsync::scenario::server_config;
use embsync::ws::{spawn_background, WsTransport};
use embsync_core::backend::{builtin_registry, Action};
use embsync_core::client::{Client, Transport};
use embsync_core::message::{MessageType, Payload};
use embsync_core::server::{ServerConfig, ServerCore};
use serde_json::json;

fn core(cfg: ServerConfig) -> ServerCore {
    ServerCore::new(cfg, builtin_registry(), Box::new(SeededIds::new(1)))
}

fn client(url: &str, cfg: &ServerConfig) -> Client<WsTransport, SystemClock> {
    let t = WsTransport::connect(url).unwrap();
    Client::new(t, SystemClock::new(), cfg.session.clone(), "ws-test", Box::new(SeededIds::new(2)))
}

fn args(v: serde_json::Value) -> Payload {
    v.as_object().unwrap().clone()
}

#[test]
fn handshake_and_operation_over_websocket() {
    let cfg = ServerConfig::default();
    let server = spawn_background(core(cfg.clone()), "127.0.0.1:0").unwrap();
    let mut c = client(&server.url(), &cfg);
    let outcome = c.connect().unwrap();
    assert!(!outcome.resumed);
    let op = c
        .dispatch(&Action::call("rk4_integrate", args(json!({"rhs": "exp_decay", "t1": 0.5, "h": 0.1}))))
        .unwrap();
    let mut kinds = Vec::new();
    loop {
        let m = c.next_message().unwrap();
        if m.operation_id.as_deref() == Some(op.as_str()) {
            kinds.push(m.kind);
            if m.kind == MessageType::OperationComplete {
                break;
            }
        }
    }
    assert_eq!(kinds.len(), 8);
    assert_eq!(kinds[0], MessageType::OperationAck);
    assert_eq!(kinds[1], MessageType::OperationStart);
}

#[test]
fn only_the_sync_path_is_served() {
    let server = spawn_background(core(ServerConfig::default()), "127.0.0.1:0").unwrap();
    let other = format!("ws://{}/other", server.addr);
    assert!(WsTransport::connect(&other).is_err());
}

#[test]
fn binding_a_taken_port_fails() {
    let server = spawn_background(core(ServerConfig::default()), "127.0.0.1:0").unwrap();
    let again = spawn_background(core(ServerConfig::default()), &server.addr.to_string());
    assert!(again.is_err());
}

#[test]
fn small_queue_overflows_while_detached() {
    let cfg = server_config(&args(json!({"queue_capacity": 1}))).unwrap();
    assert_eq!(cfg.session.queue_capacity, 1);
    let server = spawn_background(core(cfg.clone()), "127.0.0.1:0").unwrap();
    let mut c = client(&server.url(), &cfg);
    c.connect().unwrap();
    // With only one client-side slot, the second request made while offline is refused.
    c.transport_mut().reconnect().unwrap();
    c.mark_disconnected();
    let a = Action::call("rk4_integrate", args(json!({"rhs": "exp_decay", "t1": 0.2, "h": 0.1})));
    c.dispatch(&a).unwrap();
    assert!(c.dispatch(&a).is_err());
}

#[test]
fn interrupt_over_websocket() {
    let cfg = ServerConfig::default();
    let server = spawn_background(core(cfg.clone()), "127.0.0.1:0").unwrap();
    let mut c = client(&server.url(), &cfg);
    c.connect().unwrap();
    let op = c
        .dispatch(&Action::call("rk4_integrate", args(json!({"rhs": "exp_decay", "t1": 1e4, "h": 1e-3}))))
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(10);
    let mut updates = 0;
    while updates < 5 {
        let m = c.next_message().unwrap();
        updates += (m.kind == MessageType::ModelStateUpdate) as usize;
        assert!(Instant::now() < deadline);
    }
    c.interrupt(&op).unwrap();
    loop {
        let m = c.next_message().unwrap();
        if m.operation_id.as_deref() == Some(op.as_str()) && m.kind == MessageType::OperationFailed {
            assert_eq!(m.str_field("reason"), Some("interrupted"));
            break;
        }
        assert!(Instant::now() < deadline);
    }
}
