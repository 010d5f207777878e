mod common;

use common::*;
use embsync_core::backend::{builtin_registry, Action, Observation};
use embsync_core::client::{ClientError, TransportError};
use embsync_core::constraint::{case_study_constraints, Constraint, Relation, OVERSHOOT};
use embsync_core::controller::*;
use embsync_core::message::{EnhancedMessage, MessageType};
use embsync_core::perception::Alert;
use serde_json::json;

fn cfg() -> EpisodeConfig {
    let mut names = builtin_registry().names();
    names.push("raw_chunks".into());
    names.push("stall".into());
    EpisodeConfig::new(names)
}

fn maglev_intent(overshoot_streaming: bool) -> Intent {
    let mut constraints = case_study_constraints();
    for c in &mut constraints {
        if c.metric == OVERSHOOT {
            c.streaming = overshoot_streaming;
        }
    }
    Intent {
        description: "levitation loop".into(),
        constraints,
        parameters: obj(json!({
            "plant": {"num": [1.0], "den": [1.0, 3.0, 3.0, 1.0]},
            "controller": {"structure": "P", "kp": 1.0, "ki": 0.0, "kd": 0.0},
        })),
    }
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn reference_policy_meets_all_constraints_in_three_turns() {
    let (mut c, _) = loop_client();
    let mut policy = PidReferencePolicy::default();
    let r = run_episode(&maglev_intent(true), &mut c, &mut policy, &cfg()).unwrap();
    assert!(r.success);
    assert_eq!(r.turns_used, 3);
    assert_eq!(r.stop_reason, "success");

    let t1 = &r.turns[0];
    assert_eq!(t1.feedback.delta_names(), ["settling_time", "steady_state_error"]);
    assert_eq!(t1.feedback.strategy, Some(Strategy::GlobalReplan));
    let d1 = t1.decision.as_ref().unwrap();
    assert_eq!(d1.structure_change.as_deref(), Some("P -> PID"));
    let g = &d1.updates["controller"];
    assert!(close(g["kp"].as_f64().unwrap(), 2.640, 2e-3), "{g}");
    assert!(close(g["ki"].as_f64().unwrap(), 1.456, 2e-3), "{g}");
    assert!(close(g["kd"].as_f64().unwrap(), 3.192, 2e-3), "{g}");

    let t2 = &r.turns[1];
    assert_eq!(t2.feedback.delta_names(), ["settling_time"]);
    assert_eq!(t2.feedback.strategy, Some(Strategy::LocalAdjustment));
    let g2 = &t2.decision.as_ref().unwrap().updates["controller"];
    assert!(close(g2["kp"].as_f64().unwrap(), 2.640 * 1.3, 3e-3));
    // Local adjustment reruns only from the first subtask that reads the controller.
    assert_eq!(r.turns[2].subtasks, ["Simulation", "Validation"]);
    assert_eq!(r.turns[1].subtasks, ["Modeling", "Simulation", "Validation"]);

    let m = &r.final_metrics;
    assert!(close(m["settling_time"], 4.106, 0.01), "{m:?}");
    assert!(close(m["overshoot"], 11.26, 0.05), "{m:?}");
    assert!(close(m["gain_margin"], 17.27, 0.05), "{m:?}");
    assert!(close(m["phase_margin"], 55.60, 0.05), "{m:?}");
    assert!(m["settling_time"] < 5.0 && m["overshoot"] < 20.0);
    assert!(m["gain_margin"] > 10.0 && m["phase_margin"] > 45.0);
    assert!(r.final_evaluation.iter().all(|e| e.indicator));

    let events: Vec<&str> = r
        .trajectory
        .iter()
        .filter(|m| m.operation_id.as_deref() == Some(EPISODE_STREAM))
        .map(|m| m.str_field("event").unwrap())
        .collect();
    assert_eq!(events, ["episode_start", "reflection", "reflection", "reflection", "episode_end"]);
}

#[test]
fn pinned_gains_violate_overshoot_and_phase_margin() {
    let (mut c, _) = loop_client();
    let mut policy = PinnedGainsPolicy;
    let r = run_episode(&maglev_intent(false), &mut c, &mut policy, &cfg()).unwrap();
    assert!(!r.success);
    assert_eq!(r.turns_used, 1);
    assert_eq!(r.stop_reason, "policy_exhausted");
    let delta = r.turns[0].feedback.delta_names();
    assert!(delta.contains(&"overshoot".to_string()));
    assert!(delta.contains(&"phase_margin".to_string()));
    assert!(close(r.final_metrics["phase_margin"], 29.4, 0.2), "{:?}", r.final_metrics);
    assert!(close(r.final_metrics["overshoot"], 42.7, 0.3), "{:?}", r.final_metrics);
}

fn quadratic_intent(h: f64) -> Intent {
    Intent {
        description: "blow-up".into(),
        constraints: vec![Constraint::new("bounded", "y_final", Relation::Lt, 1e6, "")],
        parameters: obj(json!({"rhs": "quadratic", "y0": 1.0, "t1": 2.0, "h": h})),
    }
}

#[test]
fn divergence_is_caught_interrupted_and_repaired_until_budget() {
    let (mut c, _) = loop_client();
    let mut policy = StepHalvingPolicy;
    let r = run_episode(&quadratic_intent(0.1), &mut c, &mut policy, &cfg()).unwrap();
    assert!(!r.success);
    let t = &r.turns[0];
    let steps: Vec<f64> = t
        .hotfixes
        .iter()
        .filter_map(|h| h.repaired_action.as_ref())
        .map(|a| a.parameters().unwrap()["h"].as_f64().unwrap())
        .collect();
    assert_eq!(steps, [0.05, 0.025, 0.0125]);
    assert_eq!(t.hotfixes.len(), 4);
    assert_eq!(t.hotfixes[3].gave_up.as_deref(), Some("hotfix_budget_exhausted"));
    assert!(t.operations.iter().all(|o| o.outcome == "nan_divergence"));
    assert_eq!(t.feedback.delta_names(), ["bounded"]);
    assert!(t.feedback.evaluations[0].unverified());

    // Warning, then our interrupt, then the interrupted failure, for the first run.
    let op = &t.operations[0].operation_id;
    let pos = |f: &dyn Fn(&EnhancedMessage) -> bool| r.trajectory.iter().position(f).unwrap();
    let warn = pos(&|m| {
        m.operation_id.as_deref() == Some(op)
            && m.kind == MessageType::ModelStateUpdate
            && !m.payload["variables"]["y"].as_f64().is_some_and(f64::is_finite)
    });
    let intr = pos(&|m| {
        m.kind == MessageType::OperationRequest
            && m.operation_id.as_deref() == Some(op)
            && m.payload["operation_type"] == "interrupt"
    });
    let failed = pos(&|m| m.kind == MessageType::OperationFailed && m.operation_id.as_deref() == Some(op));
    assert!(warn < intr && intr < failed);
    assert_eq!(r.trajectory[failed].str_field("reason"), Some("interrupted"));
    assert!(!r.trajectory[failed + 1..]
        .iter()
        .any(|m| m.operation_id.as_deref() == Some(op) && m.kind != MessageType::OperationRequest));
    // Repairs flow back into the workspace.
    assert_eq!(r.workspace["h"], 0.0125);
}

#[test]
fn stiff_decay_recovers_after_one_halving() {
    let (mut c, _) = loop_client();
    let intent = Intent {
        description: "stiff decay".into(),
        constraints: vec![Constraint::new("decayed", "y_final", Relation::Lt, 1e-3, "")],
        parameters: obj(json!({"rhs": "exp_decay", "rate": 50.0, "y0": 1.0, "t1": 30.0, "h": 0.1})),
    };
    let r = run_episode(&intent, &mut c, &mut StepHalvingPolicy, &cfg()).unwrap();
    assert!(r.success, "{:?}", r.turns[0].hotfixes);
    assert_eq!(r.turns_used, 1);
    assert_eq!(r.turns[0].hotfixes.len(), 1);
    assert!(r.turns[0].hotfixes[0].repaired_operation_id.is_some());
    assert_eq!(r.workspace["h"], 0.05);
}

struct Unregistered;

impl Policy for Unregistered {
    fn name(&self) -> &str {
        "unregistered"
    }
    fn propose_global(&mut self, _: &Intent) -> Vec<String> {
        vec!["Go".into()]
    }
    fn propose_local(&mut self, _: &str, _: &Intent, _: &Workspace) -> Vec<PlanStep> {
        vec![PlanStep::primitive("go", "warp_drive", obj(json!({})), None, true)]
    }
    fn repair(&mut self, _: &Action, _: &Observation, _: &Alert) -> Option<Action> {
        None
    }
    fn decide(&mut self, _: &Feedback, _: &Workspace) -> Decision {
        Decision::default()
    }
}

#[test]
fn unknown_primitive_is_a_plan_error_locally() {
    let (mut c, _) = loop_client();
    let e = run_episode(&quadratic_intent(0.1), &mut c, &mut Unregistered, &cfg()).unwrap_err();
    assert!(matches!(e, EpisodeError::Plan(PlanError::UnknownPrimitive { .. })));
}

#[test]
fn server_side_unknown_primitive_escalates_without_repair() {
    let (mut c, _) = loop_client();
    let mut config = cfg();
    config.known_primitives.push("warp_drive".into());
    let r = run_episode(&quadratic_intent(0.1), &mut c, &mut Unregistered, &config).unwrap();
    assert!(!r.success);
    let h = &r.turns[0].hotfixes;
    assert_eq!(h.len(), 1);
    assert_eq!(h[0].cause, "operation_failed:unknown_primitive");
    assert!(h[0].gave_up.as_deref().unwrap().starts_with("no_repair"));
}

#[test]
fn zero_turns_reports_everything_unverified() {
    let (mut c, _) = loop_client();
    let mut config = cfg();
    config.max_turns = 0;
    let r = run_episode(&maglev_intent(true), &mut c, &mut PidReferencePolicy::default(), &config).unwrap();
    assert!(!r.success);
    assert_eq!(r.turns_used, 0);
    assert!(r.final_evaluation.iter().all(|e| e.unverified()));
}

#[test]
fn missing_binding_aborts_the_episode() {
    let (mut c, _) = loop_client();
    let mut intent = quadratic_intent(0.1);
    intent.parameters.remove("h");
    let e = run_episode(&intent, &mut c, &mut StepHalvingPolicy, &cfg()).unwrap_err();
    assert!(matches!(e, EpisodeError::Binding(BindingError::Unresolved { ref key, .. }) if key == "h"));
}

/// Fails every receive after the first `left`.
struct Flaky<'a> {
    inner: &'a mut LoopClient,
    left: usize,
}

impl OperationPort for Flaky<'_> {
    fn dispatch(&mut self, a: &Action) -> Result<String, ClientError> {
        self.inner.dispatch(a)
    }
    fn interrupt(&mut self, op: &str) -> Result<(), ClientError> {
        OperationPort::interrupt(self.inner, op)
    }
    fn next_message(&mut self) -> Result<EnhancedMessage, ClientError> {
        if self.left == 0 {
            return Err(ClientError::Transport(TransportError::Closed));
        }
        self.left -= 1;
        self.inner.next_message()
    }
    fn now(&self) -> f64 {
        self.inner.now()
    }
    fn session_id(&self) -> String {
        OperationPort::session_id(self.inner)
    }
    fn take_audit(&mut self) -> Vec<EnhancedMessage> {
        self.inner.take_audit()
    }
}

#[test]
fn transport_loss_returns_a_checkpoint() {
    let (mut c, _) = loop_client();
    let mut port = Flaky { inner: &mut c, left: 40 };
    let e = run_episode(&maglev_intent(true), &mut port, &mut PidReferencePolicy::default(), &cfg()).unwrap_err();
    match e {
        EpisodeError::Transport { source, checkpoint } => {
            assert_eq!(source, ClientError::Transport(TransportError::Closed));
            assert_eq!(checkpoint.turn, 1);
            assert!(checkpoint.workspace.contains_key("plant_margins"));
        }
        other => panic!("{other:?}"),
    }
}
