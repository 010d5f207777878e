use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.json"))
}

fn embsync(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_embsync"))
        .args(args)
        .env_remove("EMBSYNC_TRANSPORT")
        .env_remove("EMBSYNC_SEED")
        .output()
        .expect("binary runs")
}

fn run(name: &str, transport: &str, report: &Path) -> Output {
    embsync(&["run", scenario(name).to_str().unwrap(), "--transport", transport, "--report", report.to_str().unwrap(), "--seed", "3"])
}

fn read(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn maglev_succeeds_with_empty_delta() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    let out = run("maglev", "inproc", &report);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let doc = read(&report);
    let body = &doc["report"];
    assert_eq!(body["success"], true);
    assert_eq!(body["partial"], false);
    assert_eq!(body["turns"].as_array().unwrap().last().unwrap()["delta"], serde_json::json!([]));
    assert!(Path::new(doc["audit_log"].as_str().unwrap()).exists());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("SUCCESS"));
}

#[test]
fn frozen_ziegler_nichols_fails_with_nonempty_delta() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    assert_eq!(run("z-n-frozen", "inproc", &report).status.code(), Some(1));
    let body = &read(&report)["report"];
    assert_eq!(body["success"], false);
    assert!(!body["turns"][0]["delta"].as_array().unwrap().is_empty());
}

#[test]
fn malformed_scenario_exits_2_without_writing() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    assert_eq!(run("malformed", "ws", &report).status.code(), Some(2));
    assert!(!report.exists());

    let unknown_policy = dir.path().join("s.json");
    std::fs::write(&unknown_policy, r#"{"name": "x", "policy": {"id": "nope"}}"#).unwrap();
    let out = embsync(&["run", unknown_policy.to_str().unwrap(), "--report", report.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreachable_server_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    // Bind then drop to get a port nobody listens on.
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = format!("ws://127.0.0.1:{port}/sync");
    let s = scenario("maglev");
    let out = embsync(&["run", s.to_str().unwrap(), "--transport", "ws", "--url", &url, "--report", report.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn replay_reproduces_the_report_body() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    run("rk4-quadratic", "inproc", &report);
    let doc = read(&report);
    let again = dir.path().join("again.json");
    let out = embsync(&["replay", doc["audit_log"].as_str().unwrap(), "--report", again.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let a = serde_json::to_string(&doc["report"]).unwrap();
    let b = serde_json::to_string(&read(&again)["report"]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn truncated_log_replays_as_partial_and_empty_log_fails() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    run("stiff-decay", "inproc", &report);
    let log = read(&report)["audit_log"].as_str().unwrap().to_owned();
    let text = std::fs::read_to_string(&log).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let cut = dir.path().join("cut.jsonl");
    let half = lines.len() / 2;
    std::fs::write(&cut, format!("{}\n{}", lines[..half].join("\n"), &lines[half][..lines[half].len() / 2])).unwrap();
    let out_path = dir.path().join("cut.json");
    assert_eq!(embsync(&["replay", cut.to_str().unwrap(), "--report", out_path.to_str().unwrap()]).status.code(), Some(0));
    let body = &read(&out_path)["report"];
    assert_eq!(body["partial"], true);
    assert_eq!(body["success"], false);

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(embsync(&["replay", empty.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn transports_agree_on_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    assert_eq!(run("maglev", "inproc", &a).status.code(), Some(0));
    assert_eq!(run("maglev", "ws", &b).status.code(), Some(0));
    let (a, b) = (read(&a), read(&b));
    assert_eq!(a["report"]["final_metrics"], b["report"]["final_metrics"]);
    let per_turn = |d: &Value| d["report"]["turns"].as_array().unwrap().iter().map(|t| t["metrics"].clone()).collect::<Vec<_>>();
    assert_eq!(per_turn(&a), per_turn(&b));
}

#[test]
fn env_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("env.json");
    let out = Command::new(env!("CARGO_BIN_EXE_embsync"))
        .args(["run", scenario("stiff-decay").to_str().unwrap()])
        .env("EMBSYNC_REPORT", &report)
        .env("EMBSYNC_TRANSPORT", "inproc")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(report.exists());
}

#[test]
fn serve_accepts_sessions_and_refuses_a_second_bind() {
    use std::io::{BufRead, BufReader};
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port().to_string();
    let mut child = Command::new(env!("CARGO_BIN_EXE_embsync"))
        .args(["serve", "--port", &port])
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    assert!(line.starts_with("listening on ws://"), "{line}");

    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.json");
    let url = format!("ws://127.0.0.1:{port}/sync");
    let s = scenario("stiff-decay");
    let out = embsync(&["run", s.to_str().unwrap(), "--transport", "ws", "--url", &url, "--report", report.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let second = embsync(&["serve", "--port", &port]);
    assert_eq!(second.status.code(), Some(3));
    child.kill().unwrap();
    child.wait().unwrap();
}
