//! The dual-loop controller: hierarchical plan, action generation, mid-stream
//! repair, and reflection after each terminal evaluation.
//!
//! Decisions come from a [`Policy`]; everything else here is mechanism.

mod policies;

use alloc::borrow::ToOwned;
use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::backend::{Action, ControlCommand, Observation};
use crate::client::{Client, ClientError, Clock, Transport};
use crate::constraint::{evaluate_constraints, validate_constraints, Constraint, ConstraintError, ConstraintResult, MetricTable};
use crate::message::{new_message, number_from_wire, number_to_wire, payload, EnhancedMessage, MessageType, Payload, SequentialIds};
use crate::perception::{perceive, raise_alert, Alert, ConstraintMonitor, PerceptionConfig};

pub use policies::{
    pid_structure_adequate, policy_by_id, PidReferencePolicy, PinnedGainsPolicy, StepHalvingPolicy, POLICY_IDS,
};

pub type Workspace = Payload;

pub const DEFAULT_MAX_TURNS: usize = 5;
pub const DEFAULT_HOTFIX_BUDGET: usize = 3;

/// Operation id carried by controller-side audit records.
pub const EPISODE_STREAM: &str = "episode";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intent {
    pub description: String,
    pub constraints: Vec<Constraint>,
    #[serde(default)]
    pub parameters: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepKind {
    Primitive {
        primitive: String,
        /// Literal arguments, or `"$key"` / `"$key.path"` references into the
        /// workspace. `"$?key"` is dropped when the key is absent.
        bindings: Payload,
        /// Workspace key that receives the operation's result.
        #[serde(default)]
        output: Option<String>,
        /// Merge `result.metrics` into the turn's metric table.
        #[serde(default)]
        metrics: bool,
    },
    Control {
        command: ControlCommand,
        target: String,
    },
    Evaluate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanStep {
    pub id: String,
    #[serde(flatten)]
    pub kind: StepKind,
}

impl PlanStep {
    pub fn primitive(id: &str, primitive: &str, bindings: Payload, output: Option<&str>, metrics: bool) -> Self {
        Self {
            id: id.into(),
            kind: StepKind::Primitive {
                primitive: primitive.into(),
                bindings,
                output: output.map(ToOwned::to_owned),
                metrics,
            },
        }
    }

    pub fn evaluate(id: &str) -> Self {
        Self {
            id: id.into(),
            kind: StepKind::Evaluate,
        }
    }

    /// Top-level workspace keys this step reads.
    pub fn reads(&self) -> BTreeSet<String> {
        let mut keys = BTreeSet::new();
        match &self.kind {
            StepKind::Primitive { bindings, .. } => {
                for v in bindings.values() {
                    collect_refs(v, &mut keys);
                }
            }
            StepKind::Control { target, .. } => collect_refs(&Value::String(target.clone()), &mut keys),
            StepKind::Evaluate => {}
        }
        keys
    }
}

fn reference(s: &str) -> Option<(&str, bool)> {
    if let Some(r) = s.strip_prefix("$?") {
        Some((r, true))
    } else {
        s.strip_prefix('$').map(|r| (r, false))
    }
}

fn collect_refs(v: &Value, keys: &mut BTreeSet<String>) {
    match v {
        Value::String(s) => {
            if let Some((path, _)) = reference(s) {
                keys.insert(path.split('.').next().unwrap_or(path).to_owned());
            }
        }
        Value::Array(a) => a.iter().for_each(|x| collect_refs(x, keys)),
        Value::Object(m) => m.values().for_each(|x| collect_refs(x, keys)),
        _ => {}
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub subtask: usize,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub global_subtasks: Vec<String>,
    pub local_steps: BTreeMap<String, Vec<PlanStep>>,
    pub cursor: Cursor,
}

impl Plan {
    pub fn new(global_subtasks: Vec<String>) -> Self {
        Self {
            global_subtasks,
            local_steps: BTreeMap::new(),
            cursor: Cursor { subtask: 0, step: 0 },
        }
    }

    pub fn is_done(&self) -> bool {
        self.cursor.subtask >= self.global_subtasks.len()
    }

    pub fn current_subtask(&self) -> Option<&str> {
        self.global_subtasks.get(self.cursor.subtask).map(String::as_str)
    }

    pub fn current_step(&self) -> Option<&PlanStep> {
        let name = self.current_subtask()?;
        self.local_steps.get(name)?.get(self.cursor.step)
    }

    /// Moves past the current step, skipping exhausted subtasks.
    pub fn advance(&mut self) {
        self.cursor.step += 1;
        self.normalize();
    }

    fn normalize(&mut self) {
        while let Some(name) = self.current_subtask() {
            let len = self.local_steps.get(name).map_or(0, Vec::len);
            if self.cursor.step < len || !self.local_steps.contains_key(name) {
                break;
            }
            self.cursor.subtask += 1;
            self.cursor.step = 0;
        }
    }

    pub fn finish(&mut self) {
        self.cursor = Cursor {
            subtask: self.global_subtasks.len(),
            step: 0,
        };
    }

    /// Rewinds to the start of subtask `i`, dropping local plans from there on.
    pub fn restart_at(&mut self, i: usize) {
        let stale: Vec<String> = self.global_subtasks.iter().skip(i).cloned().collect();
        for s in stale {
            self.local_steps.remove(&s);
        }
        self.cursor = Cursor { subtask: i, step: 0 };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    LocalAdjustment,
    GlobalReplan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Unsatisfied {
    pub name: String,
    pub metric: String,
    pub observed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub unsatisfied: Vec<Unsatisfied>,
    pub evaluations: Vec<ConstraintResult>,
    /// `None` exactly when every constraint holds.
    pub strategy: Option<Strategy>,
    pub rationale: String,
}

impl Feedback {
    pub fn success(&self) -> bool {
        self.unsatisfied.is_empty()
    }

    pub fn delta_names(&self) -> Vec<String> {
        self.unsatisfied.iter().map(|u| u.name.clone()).collect()
    }

    pub fn evaluation(&self, metric: &str) -> Option<&ConstraintResult> {
        self.evaluations.iter().find(|e| e.metric == metric)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    /// Workspace entries to overwrite.
    pub updates: Payload,
    #[serde(default)]
    pub structure_change: Option<String>,
    #[serde(default)]
    pub rationale: String,
}

impl Decision {
    pub fn is_empty(&self) -> bool {
        self.updates.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BindingError {
    #[error("step {step}: workspace has no {key:?}")]
    Unresolved { step: String, key: String },
    #[error("step {0} is not executable")]
    NotExecutable(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PlanError {
    #[error("policy proposed an empty global plan")]
    Empty,
    #[error("step {step} references unregistered primitive {primitive:?}")]
    UnknownPrimitive { step: String, primitive: String },
}

/// The hooks a decision-maker supplies. Reference implementations are
/// deterministic.
pub trait Policy {
    fn name(&self) -> &str;

    /// Called once before the first turn; may seed the workspace.
    fn initialize(&mut self, _intent: &Intent, _workspace: &mut Workspace) -> Result<(), String> {
        Ok(())
    }

    fn propose_global(&mut self, intent: &Intent) -> Vec<String>;

    fn propose_local(&mut self, subtask: &str, intent: &Intent, workspace: &Workspace) -> Vec<PlanStep>;

    fn propose_action(&mut self, step: &PlanStep, workspace: &Workspace) -> Result<Action, BindingError> {
        generate_action(step, workspace)
    }

    /// A corrected action for an alert raised mid-stream, or `None` to give up.
    fn repair(&mut self, action: &Action, obs: &Observation, alert: &Alert) -> Option<Action>;

    /// Whether the current plan structure can in principle satisfy `delta`.
    fn structure_adequate(&self, _delta: &[Unsatisfied], _workspace: &Workspace) -> bool {
        true
    }

    fn decide(&mut self, feedback: &Feedback, workspace: &Workspace) -> Decision;
}

pub fn plan_global(policy: &mut dyn Policy, intent: &Intent) -> Result<Plan, PlanError> {
    let subtasks = policy.propose_global(intent);
    if subtasks.is_empty() {
        return Err(PlanError::Empty);
    }
    Ok(Plan::new(subtasks))
}

pub fn plan_local(
    policy: &mut dyn Policy,
    subtask: &str,
    intent: &Intent,
    workspace: &Workspace,
    known_primitives: &[String],
) -> Result<Vec<PlanStep>, PlanError> {
    let steps = policy.propose_local(subtask, intent, workspace);
    for s in &steps {
        if let StepKind::Primitive { primitive, .. } = &s.kind {
            if !known_primitives.iter().any(|k| k == primitive) {
                return Err(PlanError::UnknownPrimitive {
                    step: s.id.clone(),
                    primitive: primitive.clone(),
                });
            }
        }
    }
    Ok(steps)
}

pub fn lookup<'a>(workspace: &'a Workspace, path: &str) -> Option<&'a Value> {
    let mut parts = path.split('.');
    let mut v = workspace.get(parts.next()?)?;
    for p in parts {
        v = v.get(p)?;
    }
    Some(v)
}

fn resolve(step: &str, v: &Value, ws: &Workspace) -> Result<Option<Value>, BindingError> {
    match v {
        Value::String(s) => match reference(s) {
            Some((path, optional)) => match lookup(ws, path) {
                Some(found) => Ok(Some(found.clone())),
                None if optional => Ok(None),
                None => Err(BindingError::Unresolved {
                    step: step.into(),
                    key: path.into(),
                }),
            },
            None => Ok(Some(v.clone())),
        },
        Value::Array(a) => {
            let mut out = Vec::with_capacity(a.len());
            for x in a {
                if let Some(r) = resolve(step, x, ws)? {
                    out.push(r);
                }
            }
            Ok(Some(Value::Array(out)))
        }
        Value::Object(m) => {
            let mut out = Payload::new();
            for (k, x) in m {
                if let Some(r) = resolve(step, x, ws)? {
                    out.insert(k.clone(), r);
                }
            }
            Ok(Some(Value::Object(out)))
        }
        other => Ok(Some(other.clone())),
    }
}

/// Binds a plan step against the workspace.
pub fn generate_action(step: &PlanStep, workspace: &Workspace) -> Result<Action, BindingError> {
    match &step.kind {
        StepKind::Primitive { primitive, bindings, .. } => {
            let mut args = Payload::new();
            for (k, v) in bindings {
                if let Some(r) = resolve(&step.id, v, workspace)? {
                    args.insert(k.clone(), r);
                }
            }
            Ok(Action::call(primitive, args))
        }
        StepKind::Control { command, target } => {
            let target = match resolve(&step.id, &Value::String(target.clone()), workspace)? {
                Some(Value::String(t)) => t,
                _ => {
                    return Err(BindingError::Unresolved {
                        step: step.id.clone(),
                        key: target.clone(),
                    })
                }
            };
            Ok(Action::ControlCommand {
                command: *command,
                target_operation_id: target,
            })
        }
        StepKind::Evaluate => Err(BindingError::NotExecutable(step.id.clone())),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum HotFix {
    Repaired(Action),
    GiveUp { reason: String },
}

/// Repair decision for an alert: ask the policy while budget remains.
pub fn hot_fix(action: &Action, obs: &Observation, alert: &Alert, policy: &mut dyn Policy, budget: usize) -> HotFix {
    if budget == 0 {
        return HotFix::GiveUp {
            reason: "hotfix_budget_exhausted".into(),
        };
    }
    match policy.repair(action, obs, alert) {
        Some(a) => HotFix::Repaired(a),
        None => HotFix::GiveUp {
            reason: format!("no_repair:{}", alert.cause),
        },
    }
}

/// Computes the unsatisfied set and picks a strategy.
pub fn reflect(metrics: &MetricTable, constraints: &[Constraint], policy: &dyn Policy, workspace: &Workspace) -> Feedback {
    let evaluations = evaluate_constraints(metrics, constraints);
    let unsatisfied: Vec<Unsatisfied> = evaluations
        .iter()
        .filter(|e| !e.indicator)
        .map(|e| Unsatisfied {
            name: e.name.clone(),
            metric: e.metric.clone(),
            observed: e.observed,
        })
        .collect();
    let (strategy, rationale) = if unsatisfied.is_empty() {
        (None, "all constraints satisfied".to_string())
    } else if policy.structure_adequate(&unsatisfied, workspace) {
        (
            Some(Strategy::LocalAdjustment),
            format!("structure adequate; refine parameters for {:?}", names(&unsatisfied)),
        )
    } else {
        (
            Some(Strategy::GlobalReplan),
            format!("structure cannot satisfy {:?}", names(&unsatisfied)),
        )
    };
    Feedback {
        unsatisfied,
        evaluations,
        strategy,
        rationale,
    }
}

fn names(u: &[Unsatisfied]) -> Vec<&str> {
    u.iter().map(|u| u.name.as_str()).collect()
}

/// What the controller needs from a session.
pub trait OperationPort {
    fn dispatch(&mut self, action: &Action) -> Result<String, ClientError>;
    fn interrupt(&mut self, operation_id: &str) -> Result<(), ClientError>;
    fn next_message(&mut self) -> Result<EnhancedMessage, ClientError>;
    fn now(&self) -> f64;
    fn session_id(&self) -> String;
    fn take_audit(&mut self) -> Vec<EnhancedMessage>;
}

impl<T: Transport, C: Clock> OperationPort for Client<T, C> {
    fn dispatch(&mut self, action: &Action) -> Result<String, ClientError> {
        Client::dispatch(self, action)
    }

    fn interrupt(&mut self, operation_id: &str) -> Result<(), ClientError> {
        Client::interrupt(self, operation_id).map(|_| ())
    }

    fn next_message(&mut self) -> Result<EnhancedMessage, ClientError> {
        Client::next_message(self)
    }

    fn now(&self) -> f64 {
        Client::now(self)
    }

    fn session_id(&self) -> String {
        self.session().session_id().unwrap_or_default().to_owned()
    }

    fn take_audit(&mut self) -> Vec<EnhancedMessage> {
        Client::take_audit(self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub max_turns: usize,
    pub hotfix_budget: usize,
    pub known_primitives: Vec<String>,
    pub early_warning_factor: f64,
}

impl EpisodeConfig {
    pub fn new(known_primitives: Vec<String>) -> Self {
        Self {
            max_turns: DEFAULT_MAX_TURNS,
            hotfix_budget: DEFAULT_HOTFIX_BUDGET,
            known_primitives,
            early_warning_factor: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperationRecord {
    pub step: String,
    pub operation_id: String,
    pub primitive: String,
    /// `completed`, or the alert cause that ended it.
    pub outcome: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HotFixRecord {
    pub step: String,
    pub operation_id: String,
    pub cause: String,
    pub repaired_operation_id: Option<String>,
    pub repaired_action: Option<Action>,
    pub gave_up: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn: usize,
    pub subtasks: Vec<String>,
    pub operations: Vec<OperationRecord>,
    pub hotfixes: Vec<HotFixRecord>,
    pub metrics: BTreeMap<String, f64>,
    pub feedback: Feedback,
    pub decision: Option<Decision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub turns_used: usize,
    pub turns: Vec<TurnRecord>,
    pub final_metrics: MetricTable,
    pub final_evaluation: Vec<ConstraintResult>,
    pub workspace: Workspace,
    pub stop_reason: String,
    /// Every message sent and received, interleaved with controller records.
    pub trajectory: Vec<EnhancedMessage>,
}

/// Enough state to pick an aborted episode back up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub turn: usize,
    pub plan: Plan,
    pub workspace: Workspace,
    pub turns: Vec<TurnRecord>,
    /// Audit up to the failure.
    pub trajectory: Vec<EnhancedMessage>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EpisodeError {
    #[error("invalid intent: {0}")]
    Intent(#[from] ConstraintError),
    #[error("policy initialization failed: {0}")]
    Initialize(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Binding(#[from] BindingError),
    #[error("transport failed during turn {}: {source}", checkpoint.turn)]
    Transport {
        source: ClientError,
        checkpoint: Box<Checkpoint>,
    },
}

enum OpEnd {
    Completed(Payload),
    Alert(Alert),
}

enum StepEnd {
    Done,
    GaveUp,
}

struct Runner<'a, P: OperationPort> {
    port: &'a mut P,
    policy: &'a mut dyn Policy,
    intent: &'a Intent,
    cfg: &'a EpisodeConfig,
    perception: PerceptionConfig,
    workspace: Workspace,
    trajectory: Vec<EnhancedMessage>,
    local_ids: SequentialIds,
}

/// Error raised while a turn is in flight, before a checkpoint is attached.
enum TurnError {
    Transport(ClientError),
    Binding(BindingError),
    Plan(PlanError),
}

impl From<ClientError> for TurnError {
    fn from(e: ClientError) -> Self {
        TurnError::Transport(e)
    }
}

impl<P: OperationPort> Runner<'_, P> {
    fn sync_audit(&mut self) {
        let fresh = self.port.take_audit();
        self.trajectory.extend(fresh);
    }

    fn record(&mut self, event: &str, data: Value) {
        self.sync_audit();
        let p = payload([("event", json!(event)), ("data", data)]);
        let sid = self.port.session_id();
        let msg = new_message(&mut self.local_ids, self.port.now(), MessageType::CodeEvent, p, &sid, Some(EPISODE_STREAM), None)
            .expect("controller record is well-formed");
        self.trajectory.push(msg);
    }

    fn run_operation(&mut self, action: &Action) -> Result<(String, OpEnd), ClientError> {
        let op = self.port.dispatch(action)?;
        let params = action.parameters().cloned().unwrap_or_default();
        let mut monitor =
            ConstraintMonitor::new(&self.intent.constraints, params).expect("constraints validated at episode start");
        loop {
            let msg = self.port.next_message()?;
            if msg.operation_id.as_deref() != Some(op.as_str()) {
                continue;
            }
            if msg.kind == MessageType::OperationComplete {
                let result = msg.payload.get("result").and_then(Value::as_object).cloned().unwrap_or_default();
                return Ok((op, OpEnd::Completed(result)));
            }
            let Some(obs) = Observation::from_message(&msg) else { continue };
            monitor.observe(&obs);
            let percept = perceive(action, &obs, &self.perception);
            if let Some(alert) = raise_alert(&percept, &obs, monitor.record()) {
                if msg.kind != MessageType::OperationFailed {
                    self.port.interrupt(&op)?;
                    loop {
                        let m = self.port.next_message()?;
                        let terminal = matches!(m.kind, MessageType::OperationComplete | MessageType::OperationFailed);
                        if terminal && m.operation_id.as_deref() == Some(op.as_str()) {
                            break;
                        }
                    }
                }
                return Ok((op, OpEnd::Alert(alert)));
            }
        }
    }

    fn execute_step(&mut self, step: &PlanStep, turn: &mut TurnRecord) -> Result<StepEnd, TurnError> {
        let StepKind::Primitive {
            bindings,
            output,
            metrics,
            ..
        } = &step.kind
        else {
            if let StepKind::Control { .. } = step.kind {
                let action = self.policy.propose_action(step, &self.workspace).map_err(TurnError::Binding)?;
                if let Action::ControlCommand {
                    target_operation_id, ..
                } = &action
                {
                    self.port.interrupt(target_operation_id)?;
                }
            }
            return Ok(StepEnd::Done);
        };
        let mut action = self.policy.propose_action(step, &self.workspace).map_err(TurnError::Binding)?;
        let mut budget = self.cfg.hotfix_budget;
        loop {
            let (op, end) = self.run_operation(&action)?;
            if let Some(h) = turn.hotfixes.last_mut() {
                if h.step == step.id && h.gave_up.is_none() && h.repaired_operation_id.is_none() {
                    h.repaired_operation_id = Some(op.clone());
                }
            }
            let primitive = action.primitive().unwrap_or("").to_owned();
            match end {
                OpEnd::Completed(result) => {
                    turn.operations.push(OperationRecord {
                        step: step.id.clone(),
                        operation_id: op,
                        primitive,
                        outcome: "completed".into(),
                    });
                    if *metrics {
                        if let Some(Value::Object(m)) = result.get("metrics") {
                            for (k, v) in m {
                                if let Some(x) = number_from_wire(v) {
                                    turn.metrics.insert(k.clone(), x);
                                }
                            }
                        }
                    }
                    if let Some(key) = output {
                        self.workspace.insert(key.clone(), Value::Object(result));
                    }
                    return Ok(StepEnd::Done);
                }
                OpEnd::Alert(alert) => {
                    turn.operations.push(OperationRecord {
                        step: step.id.clone(),
                        operation_id: op.clone(),
                        primitive,
                        outcome: alert.cause.clone(),
                    });
                    let obs = alert.observation.clone();
                    match hot_fix(&action, &obs, &alert, self.policy, budget) {
                        HotFix::Repaired(next) => {
                            budget -= 1;
                            self.write_back(bindings, &next);
                            action = next;
                            self.record(
                                "hotfix",
                                json!({"step": step.id, "operation_id": op, "cause": alert.cause, "budget_left": budget}),
                            );
                            turn.hotfixes.push(HotFixRecord {
                                step: step.id.clone(),
                                operation_id: op,
                                cause: alert.cause.clone(),
                                repaired_operation_id: None,
                                repaired_action: Some(action.clone()),
                                gave_up: None,
                            });
                        }
                        HotFix::GiveUp { reason } => {
                            if *metrics {
                                // Streaming evidence stands in for the terminal value the run never produced.
                                for c in self.intent.constraints.iter().filter(|c| c.streaming) {
                                    if let Some(v) = alert.snapshot.worst_observed.get(&c.name) {
                                        turn.metrics.insert(c.metric.clone(), *v);
                                    }
                                }
                            }
                            self.record("escalation", json!({"step": step.id, "operation_id": op, "reason": reason}));
                            turn.hotfixes.push(HotFixRecord {
                                step: step.id.clone(),
                                operation_id: op,
                                cause: alert.cause.clone(),
                                repaired_operation_id: None,
                                repaired_action: None,
                                gave_up: Some(reason),
                            });
                            return Ok(StepEnd::GaveUp);
                        }
                    }
                }
            }
        }
    }

    /// A repaired action's arguments flow back into the workspace entries they
    /// were bound from, so later steps see the repaired values.
    fn write_back(&mut self, bindings: &Payload, repaired: &Action) {
        let Some(args) = repaired.parameters() else { return };
        for (arg, binding) in bindings {
            let Some(s) = binding.as_str() else { continue };
            let Some((path, _)) = reference(s) else { continue };
            if path.contains('.') {
                continue;
            }
            if let Some(v) = args.get(arg) {
                self.workspace.insert(path.to_owned(), v.clone());
            }
        }
    }

    fn ensure_local(&mut self, plan: &mut Plan) -> Result<(), TurnError> {
        while let Some(name) = plan.current_subtask().map(ToOwned::to_owned) {
            if !plan.local_steps.contains_key(&name) {
                let steps = plan_local(self.policy, &name, self.intent, &self.workspace, &self.cfg.known_primitives)
                    .map_err(TurnError::Plan)?;
                plan.local_steps.insert(name, steps);
            }
            let before = plan.cursor;
            plan.normalize();
            if plan.cursor == before {
                return Ok(());
            }
        }
        Ok(())
    }

    fn run_turn(&mut self, plan: &mut Plan, turn: &mut TurnRecord) -> Result<(), TurnError> {
        loop {
            self.ensure_local(plan)?;
            let Some(step) = plan.current_step().cloned() else { break };
            let name = plan.current_subtask().unwrap_or("").to_owned();
            if turn.subtasks.last() != Some(&name) {
                turn.subtasks.push(name);
            }
            match self.execute_step(&step, turn)? {
                StepEnd::Done => plan.advance(),
                StepEnd::GaveUp => {
                    plan.finish();
                    break;
                }
            }
        }
        Ok(())
    }
}

fn wire_metrics(m: &BTreeMap<String, f64>) -> Value {
    Value::Object(m.iter().map(|(k, v)| (k.clone(), number_to_wire(*v))).collect())
}

fn wire_evaluations(evals: &[ConstraintResult]) -> Value {
    Value::Array(
        evals
            .iter()
            .map(|e| {
                json!({
                    "name": e.name,
                    "metric": e.metric,
                    "indicator": e.indicator,
                    "observed": e.observed.map(number_to_wire),
                    "margin": number_to_wire(e.margin),
                })
            })
            .collect(),
    )
}

/// Runs the outer loop until every constraint holds, the policy has nothing
/// left to try, or `max_turns` turns have run.
pub fn run_episode<P: OperationPort>(
    intent: &Intent,
    port: &mut P,
    policy: &mut dyn Policy,
    cfg: &EpisodeConfig,
) -> Result<EpisodeResult, EpisodeError> {
    validate_constraints(&intent.constraints)?;
    let mut perception = PerceptionConfig::new(&intent.constraints)?;
    perception.early_warning_factor = cfg.early_warning_factor;
    let mut workspace = intent.parameters.clone();
    policy.initialize(intent, &mut workspace).map_err(EpisodeError::Initialize)?;
    let mut plan = plan_global(policy, intent)?;
    let mut runner = Runner {
        port,
        policy,
        intent,
        cfg,
        perception,
        workspace,
        trajectory: Vec::new(),
        local_ids: SequentialIds::new("local"),
    };
    runner.record(
        "episode_start",
        json!({
            "description": intent.description,
            "policy": runner.policy.name(),
            "constraints": intent.constraints.iter().map(|c| c.name.clone()).collect::<Vec<_>>(),
            "max_turns": cfg.max_turns,
            "hotfix_budget": cfg.hotfix_budget,
        }),
    );
    let mut turns: Vec<TurnRecord> = Vec::new();
    let mut stop_reason = String::from("max_turns");
    let mut last_metrics = MetricTable::new();

    if cfg.max_turns == 0 {
        stop_reason = "no_turns".into();
    }
    for turn_no in 1..=cfg.max_turns {
        let mut turn = TurnRecord {
            turn: turn_no,
            subtasks: Vec::new(),
            operations: Vec::new(),
            hotfixes: Vec::new(),
            metrics: BTreeMap::new(),
            feedback: reflect(&MetricTable::new(), &[], runner.policy, &runner.workspace),
            decision: None,
        };
        if let Err(e) = runner.run_turn(&mut plan, &mut turn) {
            runner.sync_audit();
            return Err(match e {
                TurnError::Binding(b) => EpisodeError::Binding(b),
                TurnError::Plan(p) => EpisodeError::Plan(p),
                TurnError::Transport(source) => EpisodeError::Transport {
                    source,
                    checkpoint: Box::new(Checkpoint {
                        turn: turn_no,
                        plan: plan.clone(),
                        workspace: runner.workspace.clone(),
                        turns: turns.clone(),
                        trajectory: core::mem::take(&mut runner.trajectory),
                    }),
                },
            });
        }
        let feedback = reflect(&turn.metrics, &intent.constraints, runner.policy, &runner.workspace);
        last_metrics = turn.metrics.clone();
        turn.feedback = feedback.clone();
        if feedback.success() {
            runner.record("reflection", reflection_data(&turn));
            turns.push(turn);
            stop_reason = "success".into();
            break;
        }
        let decision = runner.policy.decide(&feedback, &runner.workspace);
        turn.decision = Some(decision.clone());
        runner.record("reflection", reflection_data(&turn));
        turns.push(turn);
        if decision.is_empty() {
            stop_reason = "policy_exhausted".into();
            break;
        }
        for (k, v) in &decision.updates {
            runner.workspace.insert(k.clone(), v.clone());
        }
        match feedback.strategy {
            Some(Strategy::GlobalReplan) => {
                plan = plan_global(runner.policy, intent)?;
            }
            _ => {
                let changed: BTreeSet<&String> = decision.updates.keys().collect();
                let first = plan
                    .global_subtasks
                    .iter()
                    .position(|s| {
                        plan.local_steps
                            .get(s)
                            .is_some_and(|steps| steps.iter().any(|st| st.reads().iter().any(|k| changed.contains(k))))
                    })
                    .unwrap_or(0);
                plan.restart_at(first);
            }
        }
    }

    let final_evaluation = evaluate_constraints(&last_metrics, &intent.constraints);
    let success = final_evaluation.iter().all(|e| e.indicator) && !turns.is_empty();
    runner.record(
        "episode_end",
        json!({
            "success": success,
            "turns_used": turns.len(),
            "stop_reason": stop_reason,
            "metrics": wire_metrics(&last_metrics),
            "evaluations": wire_evaluations(&final_evaluation),
        }),
    );
    Ok(EpisodeResult {
        success,
        turns_used: turns.len(),
        turns,
        final_metrics: last_metrics,
        final_evaluation,
        workspace: runner.workspace,
        stop_reason,
        trajectory: runner.trajectory,
    })
}

fn reflection_data(turn: &TurnRecord) -> Value {
    let fb = &turn.feedback;
    json!({
        "turn": turn.turn,
        "subtasks": turn.subtasks,
        "delta": fb.delta_names(),
        "strategy": fb.strategy,
        "rationale": fb.rationale,
        "metrics": wire_metrics(&turn.metrics),
        "evaluations": wire_evaluations(&fb.evaluations),
        "operations": turn.operations.iter().map(|o| json!({"step": o.step, "operation_id": o.operation_id, "outcome": o.outcome})).collect::<Vec<_>>(),
        "hotfixes": turn.hotfixes.len(),
        "decision": turn.decision.as_ref().map(|d| json!({
            "updates": Value::Object(d.updates.clone()),
            "structure_change": d.structure_change,
            "rationale": d.rationale,
        })),
    })
}
