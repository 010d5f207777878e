//! Deterministic reference policies.

use alloc::borrow::ToOwned;
use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde_json::{json, Value};

use super::{lookup, Decision, Feedback, Intent, PlanStep, Policy, Strategy, Unsatisfied, Workspace};
use crate::backend::{gains_from_value, tf_from_value, Action, Observation};
use crate::constraint::{Constraint, GAIN_MARGIN, OVERSHOOT, PHASE_MARGIN, SETTLING_TIME, STEADY_STATE_ERROR};
use crate::control::{ziegler_nichols_ultimate, PidGains};
use crate::message::{number_from_wire, payload, Payload};
use crate::perception::Alert;

pub const POLICY_IDS: [&str; 3] = ["pid_reference", "pinned_gains", "step_halving"];

pub fn policy_by_id(id: &str) -> Option<Box<dyn Policy>> {
    match id {
        "pid_reference" => Some(Box::new(PidReferencePolicy::default())),
        "pinned_gains" => Some(Box::new(PinnedGainsPolicy::default())),
        "step_halving" => Some(Box::new(StepHalvingPolicy)),
        _ => None,
    }
}

const SHRINK: f64 = 0.7;
const GROW: f64 = 1.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Structure {
    P,
    Pi,
    Pid,
}

impl Structure {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "P" => Some(Self::P),
            "PI" => Some(Self::Pi),
            "PID" => Some(Self::Pid),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Self::P => "P",
            Self::Pi => "PI",
            Self::Pid => "PID",
        }
    }

    fn of(controller: &Value) -> Self {
        if let Some(s) = controller.get("structure").and_then(Value::as_str).and_then(Self::parse) {
            return s;
        }
        let g = gains_from_value(controller).unwrap_or(PidGains::new(0.0, 0.0, 0.0));
        if g.kd != 0.0 {
            Self::Pid
        } else if g.ki != 0.0 {
            Self::Pi
        } else {
            Self::P
        }
    }

    /// Ultimate-cycle tuning: the "some overshoot" table for PID, the classic
    /// one for PI.
    fn tune(self, ku: f64, tu: f64) -> PidGains {
        match self {
            Self::P => PidGains::new(0.5 * ku, 0.0, 0.0),
            Self::Pi => {
                let kp = 0.45 * ku;
                PidGains::new(kp, kp / (tu / 1.2), 0.0)
            }
            Self::Pid => {
                let kp = 0.33 * ku;
                PidGains::new(kp, kp / (tu / 2.0), kp * tu / 3.0)
            }
        }
    }
}

fn controller_value(structure: Structure, g: PidGains) -> Value {
    json!({"structure": structure.as_str(), "kp": g.kp, "ki": g.ki, "kd": g.kd})
}

/// An integral term is required to drive steady-state error to zero on a
/// type-0 plant; nothing else calls for a different structure.
pub fn pid_structure_adequate(delta: &[Unsatisfied], workspace: &Workspace) -> bool {
    let needs_integral = delta.iter().any(|u| u.metric == STEADY_STATE_ERROR);
    let has_integral = workspace
        .get("controller")
        .and_then(|c| gains_from_value(c).ok())
        .is_some_and(|g| g.ki != 0.0);
    !(needs_integral && !has_integral)
}

fn loop_plan(subtask: &str, intent: &Intent) -> Vec<PlanStep> {
    match subtask {
        "Modeling" => vec![PlanStep::primitive(
            "model.margins",
            "freq_margins",
            payload([("system", json!("$plant"))]),
            Some("plant_margins"),
            false,
        )],
        "Simulation" => vec![
            PlanStep::primitive(
                "sim.step",
                "lti_step_sim",
                payload([
                    ("plant", json!("$plant")),
                    ("controller", json!("$controller")),
                    ("t_final", json!("$?t_final")),
                    ("dt", json!("$?dt")),
                ]),
                Some("step_response"),
                true,
            ),
            PlanStep::primitive(
                "sim.margins",
                "freq_margins",
                payload([("system", json!("$plant")), ("controller", json!("$controller"))]),
                Some("loop_margins"),
                true,
            ),
        ],
        "Validation" if !intent.constraints.is_empty() => vec![PlanStep::evaluate("validate")],
        _ => Vec::new(),
    }
}

fn loop_subtasks() -> Vec<String> {
    ["Modeling", "Simulation", "Validation"].iter().map(|s| s.to_string()).collect()
}

/// Tunes a PID loop: escalates the controller structure when the current one
/// cannot meet the constraints, otherwise nudges one gain per turn.
#[derive(Debug, Clone, Default)]
pub struct PidReferencePolicy {
    constraints: Vec<Constraint>,
}

impl PidReferencePolicy {
    fn bound_of(&self, metric: &str) -> Option<f64> {
        self.constraints.iter().find(|c| c.metric == metric).map(|c| c.bound)
    }

    fn replan(&self, workspace: &Workspace) -> Decision {
        let controller = workspace.get("controller").cloned().unwrap_or(Value::Null);
        let current = Structure::of(&controller);
        let target = workspace
            .get("target_structure")
            .and_then(Value::as_str)
            .and_then(Structure::parse)
            .unwrap_or(Structure::Pid);
        if current >= target {
            return Decision {
                rationale: format!("{} is already the richest structure allowed", current.as_str()),
                ..Decision::default()
            };
        }
        let cycle = lookup(workspace, "plant_margins.ultimate");
        let ku = cycle.and_then(|c| c.get("gain")).and_then(number_from_wire);
        let tu = cycle.and_then(|c| c.get("period_s")).and_then(number_from_wire);
        let (Some(ku), Some(tu)) = (ku, tu) else {
            return Decision {
                rationale: "plant has no ultimate cycle to tune from".into(),
                ..Decision::default()
            };
        };
        let g = target.tune(ku, tu);
        Decision {
            updates: payload([("controller", controller_value(target, g))]),
            structure_change: Some(format!("{} -> {}", current.as_str(), target.as_str())),
            rationale: format!(
                "switch to {} tuned from Ku={ku:.4}, Tu={tu:.4}: kp={:.4} ki={:.4} kd={:.4}",
                target.as_str(),
                g.kp,
                g.ki,
                g.kd
            ),
        }
    }

    fn adjust(&self, feedback: &Feedback, workspace: &Workspace) -> Decision {
        let Some(controller) = workspace.get("controller") else {
            return Decision::default();
        };
        let Ok(mut g) = gains_from_value(controller) else {
            return Decision::default();
        };
        let structure = Structure::of(controller);
        let violated = |m: &str| feedback.unsatisfied.iter().any(|u| u.metric == m);
        let observed = |m: &str| feedback.evaluation(m).and_then(|e| e.observed);

        let (term, factor, why) = if violated(GAIN_MARGIN) {
            ("kp", SHRINK, "gain margin short")
        } else if violated(PHASE_MARGIN) {
            ("kp", SHRINK, "phase margin short")
        } else if violated(OVERSHOOT) {
            if g.ki != 0.0 {
                ("ki", SHRINK, "overshoot high")
            } else {
                ("kp", SHRINK, "overshoot high")
            }
        } else if violated(SETTLING_TIME) {
            let calm = match (observed(OVERSHOOT), self.bound_of(OVERSHOOT)) {
                (Some(mp), Some(b)) => mp < 0.5 * b,
                (_, None) => true,
                (None, Some(_)) => false,
            };
            if calm || g.kd == 0.0 {
                ("kp", GROW, "slow with overshoot to spare")
            } else {
                ("kd", GROW, "slow and near the overshoot bound")
            }
        } else if violated(STEADY_STATE_ERROR) && g.ki != 0.0 {
            ("ki", GROW, "residual steady-state error")
        } else {
            return Decision {
                rationale: "no gain rule covers the unsatisfied set".into(),
                ..Decision::default()
            };
        };
        match term {
            "kp" => g.kp *= factor,
            "ki" => g.ki *= factor,
            _ => g.kd *= factor,
        }
        Decision {
            updates: payload([("controller", controller_value(structure, g))]),
            structure_change: None,
            rationale: format!("{why}: {term} x{factor}"),
        }
    }
}

fn scale_arg(action: &Action, path: &[&str], factor: f64) -> Option<Action> {
    let (primitive, params) = (action.primitive()?, action.parameters()?);
    let mut params: Payload = params.clone();
    let (last, parents) = path.split_last()?;
    let mut slot = &mut params;
    for p in parents {
        slot = slot.get_mut(*p)?.as_object_mut()?;
    }
    let v = slot.get(*last).and_then(Value::as_f64)?;
    slot.insert((*last).to_owned(), json!(v * factor));
    Some(Action::call(primitive, params))
}

impl Policy for PidReferencePolicy {
    fn name(&self) -> &str {
        "pid_reference"
    }

    fn initialize(&mut self, intent: &Intent, workspace: &mut Workspace) -> Result<(), String> {
        self.constraints = intent.constraints.clone();
        if !workspace.contains_key("plant") {
            return Err("workspace needs a plant".into());
        }
        workspace
            .entry("controller")
            .or_insert_with(|| controller_value(Structure::P, PidGains::new(1.0, 0.0, 0.0)));
        Ok(())
    }

    fn propose_global(&mut self, _intent: &Intent) -> Vec<String> {
        loop_subtasks()
    }

    fn propose_local(&mut self, subtask: &str, intent: &Intent, _workspace: &Workspace) -> Vec<PlanStep> {
        loop_plan(subtask, intent)
    }

    fn repair(&mut self, action: &Action, _obs: &Observation, alert: &Alert) -> Option<Action> {
        let overshoot_cause = alert
            .cause
            .strip_prefix("constraint:")
            .is_some_and(|name| self.constraints.iter().any(|c| c.name == name && c.metric == OVERSHOOT));
        match (action.primitive()?, alert.cause.as_str()) {
            ("rk4_integrate", "nan_divergence") => scale_arg(action, &["h"], 0.5),
            ("lti_step_sim", _) if overshoot_cause => scale_arg(action, &["controller", "kp"], SHRINK),
            _ => None,
        }
    }

    fn structure_adequate(&self, delta: &[Unsatisfied], workspace: &Workspace) -> bool {
        pid_structure_adequate(delta, workspace)
    }

    fn decide(&mut self, feedback: &Feedback, workspace: &Workspace) -> Decision {
        match feedback.strategy {
            Some(Strategy::GlobalReplan) => self.replan(workspace),
            Some(Strategy::LocalAdjustment) => self.adjust(feedback, workspace),
            None => Decision::default(),
        }
    }
}

/// Classic Ziegler-Nichols gains, computed once and never revised. The
/// open-loop baseline.
#[derive(Debug, Clone, Default)]
pub struct PinnedGainsPolicy;

impl Policy for PinnedGainsPolicy {
    fn name(&self) -> &str {
        "pinned_gains"
    }

    fn initialize(&mut self, _intent: &Intent, workspace: &mut Workspace) -> Result<(), String> {
        let plant = workspace.get("plant").ok_or("workspace needs a plant")?;
        let tf = tf_from_value(plant)?;
        let z = ziegler_nichols_ultimate(&tf).map_err(|e| e.to_string())?;
        workspace.insert("controller".into(), controller_value(Structure::Pid, z.gains));
        Ok(())
    }

    fn propose_global(&mut self, _intent: &Intent) -> Vec<String> {
        loop_subtasks()
    }

    fn propose_local(&mut self, subtask: &str, intent: &Intent, _workspace: &Workspace) -> Vec<PlanStep> {
        loop_plan(subtask, intent)
    }

    fn repair(&mut self, _action: &Action, _obs: &Observation, _alert: &Alert) -> Option<Action> {
        None
    }

    fn decide(&mut self, _feedback: &Feedback, _workspace: &Workspace) -> Decision {
        Decision {
            rationale: "gains are pinned".into(),
            ..Decision::default()
        }
    }
}

/// Integrates an ODE and halves the step whenever the trajectory blows up.
#[derive(Debug, Clone, Default)]
pub struct StepHalvingPolicy;

impl Policy for StepHalvingPolicy {
    fn name(&self) -> &str {
        "step_halving"
    }

    fn propose_global(&mut self, _intent: &Intent) -> Vec<String> {
        vec!["Integration".into(), "Validation".into()]
    }

    fn propose_local(&mut self, subtask: &str, intent: &Intent, _workspace: &Workspace) -> Vec<PlanStep> {
        match subtask {
            "Integration" => vec![PlanStep::primitive(
                "integrate",
                "rk4_integrate",
                payload([
                    ("rhs", json!("$rhs")),
                    ("y0", json!("$?y0")),
                    ("t0", json!("$?t0")),
                    ("t1", json!("$t1")),
                    ("h", json!("$h")),
                    ("rate", json!("$?rate")),
                ]),
                Some("integration"),
                true,
            )],
            "Validation" if !intent.constraints.is_empty() => vec![PlanStep::evaluate("validate")],
            _ => Vec::new(),
        }
    }

    fn repair(&mut self, action: &Action, _obs: &Observation, alert: &Alert) -> Option<Action> {
        if alert.cause == "nan_divergence" && action.primitive() == Some("rk4_integrate") {
            scale_arg(action, &["h"], 0.5)
        } else {
            None
        }
    }

    fn decide(&mut self, _feedback: &Feedback, _workspace: &Workspace) -> Decision {
        Decision::default()
    }
}
