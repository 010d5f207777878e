//! Episode reports, computed from the audit log alone so a replay of the
//! log reproduces the report a run wrote.

use std::collections::{BTreeMap, BTreeSet};

use embsync_core::controller::EPISODE_STREAM;
use embsync_core::message::{EnhancedMessage, MessageType};
use serde_json::{json, Map, Value};

fn episode_event(m: &EnhancedMessage) -> Option<(&str, &Value)> {
    if m.kind != MessageType::CodeEvent || m.operation_id.as_deref() != Some(EPISODE_STREAM) {
        return None;
    }
    let event = m.payload.get("event")?.as_str()?;
    Some((event, m.payload.get("data").unwrap_or(&Value::Null)))
}

/// Report body for one episode log.
pub fn build_report(messages: &[EnhancedMessage]) -> Value {
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    let mut operations = BTreeSet::new();
    let mut turns = Vec::new();
    let (mut hotfixes, mut escalations) = (0u64, 0u64);
    let mut start: Option<&Value> = None;
    let mut end: Option<&Value> = None;

    for m in messages {
        *counts.entry(m.kind.as_str()).or_default() += 1;
        if let Some(op) = m.operation_id.as_deref() {
            if op != EPISODE_STREAM {
                operations.insert(op);
            }
        }
        match episode_event(m) {
            Some(("episode_start", d)) => start = Some(d),
            Some(("episode_end", d)) => end = Some(d),
            Some(("hotfix", _)) => hotfixes += 1,
            Some(("escalation", _)) => escalations += 1,
            Some(("reflection", d)) => {
                let decision = d.get("decision").unwrap_or(&Value::Null);
                turns.push(json!({
                    "turn": d.get("turn"),
                    "delta": d.get("delta"),
                    "strategy": d.get("strategy"),
                    "structure_change": decision.get("structure_change"),
                    "updates": decision.get("updates"),
                    "metrics": d.get("metrics"),
                }));
            }
            _ => {}
        }
    }

    let field = |v: Option<&Value>, k: &str| v.and_then(|v| v.get(k)).cloned().unwrap_or(Value::Null);
    let (t0, t1) = match (messages.first(), messages.last()) {
        (Some(a), Some(b)) => (a.timestamp, b.timestamp),
        _ => (0.0, 0.0),
    };
    let mut out = Map::new();
    out.insert("policy".into(), field(start, "policy"));
    out.insert("description".into(), field(start, "description"));
    out.insert("success".into(), json!(end.and_then(|e| e.get("success")).and_then(Value::as_bool).unwrap_or(false)));
    out.insert("partial".into(), json!(end.is_none()));
    out.insert("stop_reason".into(), end.map_or(json!("transport_error"), |e| field(Some(e), "stop_reason")));
    out.insert("turns_used".into(), json!(turns.len()));
    out.insert("turns".into(), Value::Array(turns));
    out.insert("final_metrics".into(), field(end, "metrics"));
    out.insert("final_evaluation".into(), field(end, "evaluations"));
    out.insert("operations".into(), json!(operations.len()));
    out.insert("hotfixes".into(), json!(hotfixes));
    out.insert("escalations".into(), json!(escalations));
    out.insert("message_counts".into(), json!(counts));
    out.insert("messages".into(), json!(messages.len()));
    out.insert("timing".into(), json!({"start": t0, "end": t1, "duration_s": t1 - t0}));
    Value::Object(out)
}

/// File form: the report next to the log it came from.
pub fn report_document(audit_log: &str, body: Value) -> Value {
    json!({"audit_log": audit_log, "report": body})
}

/// Few-line human summary.
pub fn summary(body: &Value) -> String {
    let mut s = String::new();
    let get = |k: &str| body.get(k).cloned().unwrap_or(Value::Null);
    let verdict = if get("partial") == json!(true) {
        "INCOMPLETE"
    } else if get("success") == json!(true) {
        "SUCCESS"
    } else {
        "FAILURE"
    };
    s.push_str(&format!(
        "{verdict}: stop_reason={} turns={} operations={} hotfixes={}\n",
        get("stop_reason"),
        get("turns_used"),
        get("operations"),
        get("hotfixes")
    ));
    if let Some(turns) = body.get("turns").and_then(Value::as_array) {
        for t in turns {
            s.push_str(&format!("  turn {}: delta={}", t["turn"], t["delta"]));
            if !t["structure_change"].is_null() {
                s.push_str(&format!(" replan={}", t["structure_change"]));
            }
            s.push('\n');
        }
    }
    if let Some(m) = body.get("final_metrics").and_then(Value::as_object) {
        let parts: Vec<String> = m.iter().map(|(k, v)| format!("{k}={v}")).collect();
        s.push_str(&format!("  final: {}\n", parts.join(" ")));
    }
    s
}
