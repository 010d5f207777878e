//! The execution backend: interruptible streaming primitives and the values
//! that flow in and out of them.

mod builtin;

use alloc::borrow::ToOwned;
use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::control::{PidGains, TransferFunction};
use crate::message::{number_from_wire, number_to_wire, EnhancedMessage, MessageType, Payload};

pub use builtin::{builtin_registry, rhs_names};

pub const DEFAULT_DECODE_FAILURE_LIMIT: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlCommand {
    Interrupt,
    Stop,
}

impl ControlCommand {
    pub fn as_str(self) -> &'static str {
        match self {
            ControlCommand::Interrupt => "interrupt",
            ControlCommand::Stop => "stop",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Action {
    PrimitiveCall { primitive: String, parameters: Payload },
    ControlCommand { command: ControlCommand, target_operation_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("bad operation_request: {0}")]
pub struct RequestError(pub String);

impl Action {
    pub fn call(primitive: &str, parameters: Payload) -> Self {
        Action::PrimitiveCall {
            primitive: primitive.into(),
            parameters,
        }
    }

    pub fn interrupt(target: &str) -> Self {
        Action::ControlCommand {
            command: ControlCommand::Interrupt,
            target_operation_id: target.into(),
        }
    }

    pub fn primitive(&self) -> Option<&str> {
        match self {
            Action::PrimitiveCall { primitive, .. } => Some(primitive),
            Action::ControlCommand { .. } => None,
        }
    }

    pub fn parameters(&self) -> Option<&Payload> {
        match self {
            Action::PrimitiveCall { parameters, .. } => Some(parameters),
            Action::ControlCommand { .. } => None,
        }
    }

    /// The `operation_request` payload carrying this action.
    pub fn to_request_payload(&self) -> Payload {
        let v = match self {
            Action::PrimitiveCall { primitive, parameters } => json!({
                "operation_type": "execute_primitive",
                "parameters": {"primitive": primitive, "args": parameters},
            }),
            Action::ControlCommand {
                command,
                target_operation_id,
            } => json!({
                "operation_type": command.as_str(),
                "parameters": {"target_operation_id": target_operation_id},
            }),
        };
        match v {
            Value::Object(m) => m,
            _ => unreachable!(),
        }
    }

    pub fn from_request_payload(p: &Payload) -> Result<Self, RequestError> {
        let op_type = p
            .get("operation_type")
            .and_then(Value::as_str)
            .ok_or_else(|| RequestError("operation_type missing".into()))?;
        let params = p
            .get("parameters")
            .and_then(Value::as_object)
            .ok_or_else(|| RequestError("parameters missing".into()))?;
        match op_type {
            "execute_primitive" => {
                let primitive = params
                    .get("primitive")
                    .and_then(Value::as_str)
                    .ok_or_else(|| RequestError("parameters.primitive missing".into()))?;
                let args = match params.get("args") {
                    None => Payload::new(),
                    Some(Value::Object(m)) => m.clone(),
                    Some(_) => return Err(RequestError("parameters.args must be a map".into())),
                };
                Ok(Action::call(primitive, args))
            }
            "interrupt" | "stop" => {
                let target = params
                    .get("target_operation_id")
                    .and_then(Value::as_str)
                    .ok_or_else(|| RequestError("parameters.target_operation_id missing".into()))?;
                let command = if op_type == "stop" {
                    ControlCommand::Stop
                } else {
                    ControlCommand::Interrupt
                };
                Ok(Action::ControlCommand {
                    command,
                    target_operation_id: target.into(),
                })
            }
            other => Err(RequestError(format!("unsupported operation_type {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SysEvent {
    pub event: String,
    #[serde(default)]
    pub data: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub sim_time: f64,
    pub variables: BTreeMap<String, f64>,
}

/// One item of the live observation stream.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stdout: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sys_event: Option<SysEvent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectory: Option<TrajectorySample>,
}

impl Observation {
    pub fn stdout(text: &str) -> Self {
        Self {
            stdout: Some(text.into()),
            ..Self::default()
        }
    }

    pub fn stderr(text: &str) -> Self {
        Self {
            stderr: Some(text.into()),
            ..Self::default()
        }
    }

    pub fn event(event: &str, data: Payload) -> Self {
        Self {
            sys_event: Some(SysEvent {
                event: event.into(),
                data,
            }),
            ..Self::default()
        }
    }

    pub fn sample(sim_time: f64, vars: &[(&str, f64)]) -> Self {
        Self {
            trajectory: Some(TrajectorySample {
                sim_time,
                variables: vars.iter().map(|(k, v)| ((*k).to_owned(), *v)).collect(),
            }),
            ..Self::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.stdout.is_none() && self.stderr.is_none() && self.sys_event.is_none() && self.trajectory.is_none()
    }

    /// The observation carried by a streaming or failure message, if any.
    /// `operation_failed` surfaces as a sys event named `operation_failed`.
    pub fn from_message(msg: &EnhancedMessage) -> Option<Self> {
        match msg.kind {
            MessageType::CodeOutput => Some(Self {
                stdout: msg.str_field("stdout").map(ToOwned::to_owned),
                stderr: msg
                    .str_field("stderr")
                    .filter(|s| !s.is_empty())
                    .map(ToOwned::to_owned),
                ..Self::default()
            }),
            MessageType::CodeEvent => {
                let data = msg
                    .payload
                    .get("data")
                    .and_then(Value::as_object)
                    .cloned()
                    .unwrap_or_default();
                Some(Self::event(msg.str_field("event")?, data))
            }
            MessageType::ModelStateUpdate => {
                let sim_time = msg.payload.get("sim_time").and_then(number_from_wire)?;
                let vars = msg.payload.get("variables")?.as_object()?;
                let mut variables = BTreeMap::new();
                for (name, arr) in vars {
                    let arr = arr.as_array()?;
                    if arr.len() == 1 {
                        variables.insert(name.clone(), number_from_wire(&arr[0])?);
                    } else {
                        for (i, v) in arr.iter().enumerate() {
                            variables.insert(format!("{name}[{i}]"), number_from_wire(v)?);
                        }
                    }
                }
                Some(Self {
                    trajectory: Some(TrajectorySample { sim_time, variables }),
                    ..Self::default()
                })
            }
            MessageType::OperationFailed => {
                let reason = msg.str_field("reason").unwrap_or("");
                let data: Payload = [("reason".to_string(), Value::String(reason.into()))].into_iter().collect();
                Some(Self::event("operation_failed", data))
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Number,
    Integer,
    String,
    Bool,
    Array,
    Map,
    TransferFunction,
    Gains,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    #[serde(default)]
    pub units: String,
    /// `None` marks a required parameter.
    #[serde(default)]
    pub default: Option<Value>,
}

impl ParamSpec {
    pub fn required(name: &str, kind: ParamKind, units: &str) -> Self {
        Self {
            name: name.into(),
            kind,
            units: units.into(),
            default: None,
        }
    }

    pub fn optional(name: &str, kind: ParamKind, units: &str, default: Value) -> Self {
        Self {
            name: name.into(),
            kind,
            units: units.into(),
            default: Some(default),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveSpec {
    pub name: String,
    pub params: Vec<ParamSpec>,
    pub emits_trajectory: bool,
    pub step_budget: u64,
}

/// Something a primitive produced during one internal step.
#[derive(Debug, Clone, PartialEq)]
pub enum Emission {
    Stdout(String),
    Stderr(String),
    /// Undecoded bytes from the primitive's output channel.
    RawOutput(Vec<u8>),
    Event { event: String, data: Payload },
    State { sim_time: f64, variables: Vec<(String, Vec<f64>)> },
}

impl Emission {
    pub fn state(sim_time: f64, vars: &[(&str, f64)]) -> Self {
        Emission::State {
            sim_time,
            variables: vars.iter().map(|(k, v)| ((*k).to_owned(), alloc::vec![*v])).collect(),
        }
    }

    /// `(message type, payload)` on the wire.
    pub fn to_payload(&self) -> Option<(MessageType, Payload)> {
        let p = match self {
            Emission::Stdout(s) => (MessageType::CodeOutput, crate::message::payload([("stdout", json!(s))])),
            Emission::Stderr(s) => (
                MessageType::CodeOutput,
                crate::message::payload([("stdout", json!("")), ("stderr", json!(s))]),
            ),
            Emission::RawOutput(_) => return None,
            Emission::Event { event, data } => (
                MessageType::CodeEvent,
                crate::message::payload([("event", json!(event)), ("data", Value::Object(data.clone()))]),
            ),
            Emission::State { sim_time, variables } => {
                let vars: Payload = variables
                    .iter()
                    .map(|(k, vs)| (k.clone(), Value::Array(vs.iter().map(|v| number_to_wire(*v)).collect())))
                    .collect();
                (
                    MessageType::ModelStateUpdate,
                    crate::message::payload([("variables", Value::Object(vars)), ("sim_time", number_to_wire(*sim_time))]),
                )
            }
        };
        Some(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Continue,
    Done(Payload),
}

/// A running primitive, advanced one internal step at a time. The executor
/// checks the interrupt flag between calls.
pub trait Primitive: Send {
    fn step(&mut self, out: &mut Vec<Emission>) -> Result<StepOutcome, String>;
}

pub type Factory = Box<dyn Fn(&Payload) -> Result<Box<dyn Primitive>, String> + Send + Sync>;

struct Entry {
    spec: PrimitiveSpec,
    factory: Factory,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("primitive {0:?} is already registered")]
    Duplicate(String),
}

#[derive(Default)]
pub struct Registry {
    entries: BTreeMap<String, Entry>,
}

impl core::fmt::Debug for Registry {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_list().entries(self.entries.keys()).finish()
    }
}

/// Why a call could not be turned into a running primitive.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InstantiateError {
    #[error("unknown_primitive")]
    Unknown,
    #[error("invalid_arguments: {0}")]
    InvalidArguments(String),
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, spec: PrimitiveSpec, factory: Factory) -> Result<(), RegistryError> {
        if self.entries.contains_key(&spec.name) {
            return Err(RegistryError::Duplicate(spec.name));
        }
        self.entries.insert(spec.name.clone(), Entry { spec, factory });
        Ok(())
    }

    pub fn spec(&self, name: &str) -> Option<&PrimitiveSpec> {
        self.entries.get(name).map(|e| &e.spec)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn instantiate(&self, name: &str, args: &Payload) -> Result<(Box<dyn Primitive>, u64), InstantiateError> {
        let entry = self.entries.get(name).ok_or(InstantiateError::Unknown)?;
        let resolved = resolve_args(&entry.spec, args).map_err(InstantiateError::InvalidArguments)?;
        let body = (entry.factory)(&resolved).map_err(InstantiateError::InvalidArguments)?;
        Ok((body, entry.spec.step_budget))
    }
}

fn kind_matches(kind: ParamKind, v: &Value) -> bool {
    match kind {
        ParamKind::Number => number_from_wire(v).is_some(),
        ParamKind::Integer => v.as_u64().is_some(),
        ParamKind::String => v.is_string(),
        ParamKind::Bool => v.is_boolean(),
        ParamKind::Array => v.is_array(),
        ParamKind::Map => v.is_object(),
        ParamKind::TransferFunction => tf_from_value(v).is_ok(),
        ParamKind::Gains => gains_from_value(v).is_ok(),
    }
}

/// Fills defaults and type-checks arguments against a spec. Unknown
/// arguments are rejected.
pub fn resolve_args(spec: &PrimitiveSpec, args: &Payload) -> Result<Payload, String> {
    for key in args.keys() {
        if !spec.params.iter().any(|p| &p.name == key) {
            return Err(format!("unexpected argument {key:?}"));
        }
    }
    let mut out = Payload::new();
    for p in &spec.params {
        match args.get(&p.name).or(p.default.as_ref()) {
            Some(v) if kind_matches(p.kind, v) => {
                out.insert(p.name.clone(), v.clone());
            }
            Some(_) => return Err(format!("argument {:?} is not a valid {:?}", p.name, p.kind)),
            None => return Err(format!("missing argument {:?}", p.name)),
        }
    }
    Ok(out)
}

pub fn tf_to_value(tf: &TransferFunction) -> Value {
    json!({"num": tf.num, "den": tf.den})
}

pub fn tf_from_value(v: &Value) -> Result<TransferFunction, String> {
    let coeffs = |key: &str| -> Result<Vec<f64>, String> {
        v.get(key)
            .and_then(Value::as_array)
            .ok_or_else(|| format!("transfer function needs {key:?}"))?
            .iter()
            .map(|c| c.as_f64().ok_or_else(|| format!("{key} coefficients must be numbers")))
            .collect()
    };
    TransferFunction::new(coeffs("num")?, coeffs("den")?).map_err(|e| e.to_string())
}

pub fn gains_to_value(g: PidGains) -> Value {
    json!({"kp": g.kp, "ki": g.ki, "kd": g.kd})
}

/// Reads `{kp, ki, kd}`; absent terms are zero.
pub fn gains_from_value(v: &Value) -> Result<PidGains, String> {
    let m = v.as_object().ok_or("gains must be a map")?;
    let get = |k: &str| -> Result<f64, String> {
        match m.get(k) {
            None => Ok(0.0),
            Some(x) => x.as_f64().ok_or_else(|| format!("gain {k} must be a number")),
        }
    };
    Ok(PidGains::new(get("kp")?, get("ki")?, get("kd")?))
}

/// Decodes one raw output chunk. Valid UTF-8 resets the failure counter; the
/// `limit`-th consecutive failure raises the degrade signal.
pub fn decode_output_chunk_with_limit(raw: &[u8], failures: u32, limit: u32) -> (Option<String>, u32, bool) {
    match core::str::from_utf8(raw) {
        Ok(s) => (Some(s.to_owned()), 0, false),
        Err(_) => {
            let n = failures + 1;
            (None, n, n >= limit)
        }
    }
}

pub fn decode_output_chunk(raw: &[u8], failures: u32) -> (Option<String>, u32, bool) {
    decode_output_chunk_with_limit(raw, failures, DEFAULT_DECODE_FAILURE_LIMIT)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_counter_resets_on_good_chunk() {
        let bad = [0xffu8, 0xfe];
        let (_, c, d) = decode_output_chunk(&bad, 0);
        let (_, c, d2) = decode_output_chunk(&bad, c);
        let (text, c, d3) = decode_output_chunk(b"ok", c);
        assert_eq!((text.as_deref(), c, d || d2 || d3), (Some("ok"), 0, false));
    }

    #[test]
    fn third_bad_chunk_degrades() {
        let bad = [0xc3u8];
        let mut c = 0;
        let mut signals = Vec::new();
        for _ in 0..3 {
            let (t, n, d) = decode_output_chunk(&bad, c);
            assert!(t.is_none());
            c = n;
            signals.push(d);
        }
        assert_eq!(signals, [false, false, true]);
    }

    #[test]
    fn clean_stream_keeps_counter_at_zero() {
        let mut c = 0;
        for chunk in ["a", "b", "ü"] {
            c = decode_output_chunk(chunk.as_bytes(), c).1;
            assert_eq!(c, 0);
        }
    }

    #[test]
    fn action_request_round_trip() {
        let a = Action::call("rk4_integrate", crate::message::payload([("h", json!(0.1))]));
        assert_eq!(Action::from_request_payload(&a.to_request_payload()).unwrap(), a);
        let i = Action::interrupt("op-7");
        let p = i.to_request_payload();
        assert_eq!(p["operation_type"], "interrupt");
        assert_eq!(Action::from_request_payload(&p).unwrap(), i);
    }

    #[test]
    fn observation_from_state_update_expands_vectors() {
        let e = Emission::State {
            sim_time: 0.5,
            variables: alloc::vec![("y".into(), alloc::vec![f64::INFINITY]), ("x".into(), alloc::vec![1.0, 2.0])],
        };
        let (kind, p) = e.to_payload().unwrap();
        let msg = EnhancedMessage::raw("m".into(), kind, p, 0.0, "s").with_operation("op");
        let obs = Observation::from_message(&msg).unwrap();
        let tr = obs.trajectory.unwrap();
        assert_eq!(tr.variables["y"], f64::INFINITY);
        assert_eq!(tr.variables["x[1]"], 2.0);
    }

    #[test]
    fn resolve_fills_defaults_and_rejects_strays() {
        let spec = PrimitiveSpec {
            name: "p".into(),
            params: alloc::vec![
                ParamSpec::required("a", ParamKind::Number, ""),
                ParamSpec::optional("b", ParamKind::Number, "", json!(2.0)),
            ],
            emits_trajectory: false,
            step_budget: 10,
        };
        let args = crate::message::payload([("a", json!(1.0))]);
        let r = resolve_args(&spec, &args).unwrap();
        assert_eq!(r["b"], json!(2.0));
        assert!(resolve_args(&spec, &Payload::new()).is_err());
        let stray = crate::message::payload([("a", json!(1.0)), ("c", json!(1))]);
        assert!(resolve_args(&spec, &stray).is_err());
    }
}
