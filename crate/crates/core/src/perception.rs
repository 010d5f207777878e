//! Runtime perception: classify each observation, track streaming
//! constraints, and raise alerts for the repair loop.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backend::{Action, Observation};
use crate::constraint::{validate_constraints, Constraint, ConstraintError};
use crate::message::Payload;

pub const WARNING_EVENTS: [&str; 3] = ["stiffness", "algebraic_loop", "encoding_degraded"];
pub const FATAL_EVENTS: [&str; 1] = ["solver_abort"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PerceptState {
    Normal,
    Warning,
    Error,
}

/// What `classify` may consult besides the observation itself.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptionConfig {
    pub streaming: Vec<Constraint>,
    /// Alert once the margin drops below `-(1 - factor) * |bound|`; 1.0 alerts exactly at violation.
    pub early_warning_factor: f64,
    /// The operation was stopped by this agent, so its `interrupted` failure is intentional.
    pub self_interrupted: bool,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            streaming: Vec::new(),
            early_warning_factor: 1.0,
            self_interrupted: false,
        }
    }
}

impl PerceptionConfig {
    pub fn new(constraints: &[Constraint]) -> Result<Self, ConstraintError> {
        validate_constraints(constraints)?;
        Ok(Self {
            streaming: constraints.iter().filter(|c| c.streaming).cloned().collect(),
            ..Self::default()
        })
    }

    fn alert_threshold(&self, c: &Constraint) -> f64 {
        (1.0 - self.early_warning_factor) * c.bound.abs()
    }
}

/// Classification with the reason that decided it.
#[derive(Debug, Clone, PartialEq)]
pub struct Percept {
    pub state: PerceptState,
    pub cause: Option<String>,
    pub detail: Option<String>,
}

impl Percept {
    fn normal() -> Self {
        Self {
            state: PerceptState::Normal,
            cause: None,
            detail: None,
        }
    }

    fn new(state: PerceptState, cause: impl Into<String>, detail: Option<String>) -> Self {
        Self {
            state,
            cause: Some(cause.into()),
            detail,
        }
    }
}

pub fn perceive(_action: &Action, obs: &Observation, cfg: &PerceptionConfig) -> Percept {
    if let Some(err) = obs.stderr.as_deref().filter(|s| !s.is_empty()) {
        return Percept::new(PerceptState::Error, "stderr", Some(err.into()));
    }
    if let Some(ev) = &obs.sys_event {
        if FATAL_EVENTS.contains(&ev.event.as_str()) {
            return Percept::new(PerceptState::Error, ev.event.clone(), None);
        }
        if ev.event == "operation_failed" {
            let reason = ev.data.get("reason").and_then(|v| v.as_str()).unwrap_or("");
            if !(reason == "interrupted" && cfg.self_interrupted) {
                return Percept::new(PerceptState::Error, format!("operation_failed:{reason}"), Some(reason.into()));
            }
        }
    }
    if let Some(tr) = &obs.trajectory {
        if let Some((name, v)) = tr.variables.iter().find(|(_, v)| !v.is_finite()) {
            return Percept::new(PerceptState::Warning, "nan_divergence", Some(format!("{name}={v}")));
        }
        for c in &cfg.streaming {
            if let Some(v) = c.streaming_value(&tr.variables) {
                if c.margin(v) < cfg.alert_threshold(c) {
                    return Percept::new(
                        PerceptState::Warning,
                        format!("constraint:{}", c.name),
                        Some(format!("{}={v}", c.metric)),
                    );
                }
            }
        }
    }
    if let Some(ev) = &obs.sys_event {
        if WARNING_EVENTS.contains(&ev.event.as_str()) {
            return Percept::new(PerceptState::Warning, ev.event.clone(), None);
        }
    }
    Percept::normal()
}

/// Latent state of one observation; Error dominates Warning dominates Normal.
pub fn classify(action: &Action, obs: &Observation, cfg: &PerceptionConfig) -> PerceptState {
    perceive(action, obs, cfg).state
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolationEvent {
    pub sim_time: f64,
    pub constraint: String,
    pub observed: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MonitorRecord {
    /// Running maximum of each streaming constraint's margin.
    pub best_margin: BTreeMap<String, f64>,
    pub best_parameters: Payload,
    pub best_sim_time: Option<f64>,
    pub violation_events: Vec<ViolationEvent>,
    /// Largest observed value per streaming constraint.
    pub worst_observed: BTreeMap<String, f64>,
    #[serde(skip)]
    best_aggregate: Option<f64>,
}

/// Per-operation consumer that keeps the best-so-far snapshot.
#[derive(Debug, Clone)]
pub struct ConstraintMonitor {
    constraints: Vec<Constraint>,
    parameters: Payload,
    record: MonitorRecord,
}

impl ConstraintMonitor {
    /// Fails up front if any constraint cannot be evaluated.
    pub fn new(constraints: &[Constraint], parameters: Payload) -> Result<Self, ConstraintError> {
        validate_constraints(constraints)?;
        Ok(Self {
            constraints: constraints.iter().filter(|c| c.streaming).cloned().collect(),
            parameters,
            record: MonitorRecord::default(),
        })
    }

    pub fn observe(&mut self, obs: &Observation) {
        let Some(tr) = &obs.trajectory else { return };
        let mut aggregate: Option<f64> = None;
        for c in &self.constraints {
            let Some(v) = c.streaming_value(&tr.variables) else { continue };
            let m = c.margin(v);
            let best = self.record.best_margin.entry(c.name.clone()).or_insert(m);
            if m > *best {
                *best = m;
            }
            if !v.is_nan() {
                let worst = self.record.worst_observed.entry(c.name.clone()).or_insert(v);
                if v > *worst {
                    *worst = v;
                }
            }
            let already = self.record.violation_events.iter().any(|e| e.constraint == c.name);
            if !c.indicator(v) && !already {
                self.record.violation_events.push(ViolationEvent {
                    sim_time: tr.sim_time,
                    constraint: c.name.clone(),
                    observed: v,
                });
            }
            aggregate = Some(aggregate.map_or(m, |a: f64| a.min(m)));
        }
        if let Some(agg) = aggregate {
            if self.record.best_aggregate.map_or(true, |b| agg > b) {
                self.record.best_aggregate = Some(agg);
                self.record.best_parameters = self.parameters.clone();
                self.record.best_sim_time = Some(tr.sim_time);
            }
        }
    }

    pub fn record(&self) -> &MonitorRecord {
        &self.record
    }

    pub fn into_record(self) -> MonitorRecord {
        self.record
    }
}

pub fn monitor_constraints<'a, I>(stream: I, constraints: &[Constraint]) -> Result<MonitorRecord, ConstraintError>
where
    I: IntoIterator<Item = &'a Observation>,
{
    let mut m = ConstraintMonitor::new(constraints, Payload::new())?;
    for obs in stream {
        m.observe(obs);
    }
    Ok(m.into_record())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub class: PerceptState,
    pub cause: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    pub observation: Observation,
    pub snapshot: MonitorRecord,
}

pub fn raise_alert(percept: &Percept, obs: &Observation, snapshot: &MonitorRecord) -> Option<Alert> {
    if percept.state == PerceptState::Normal {
        return None;
    }
    Some(Alert {
        class: percept.state,
        cause: percept.cause.clone().unwrap_or_else(|| "unspecified".to_string()),
        detail: percept.detail.clone(),
        observation: obs.clone(),
        snapshot: snapshot.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraint::{Relation, OVERSHOOT};
    use serde_json::json;

    fn act() -> Action {
        Action::call("lti_step_sim", Payload::new())
    }

    fn overshoot() -> Constraint {
        Constraint::new("overshoot", OVERSHOOT, Relation::Lt, 20.0, "%").streaming()
    }

    #[test]
    fn clean_stream_is_normal() {
        let mut obs = Observation::sample(1.0, &[("y", 0.5)]);
        obs.stdout = Some("Iteration 42".into());
        assert_eq!(classify(&act(), &obs, &PerceptionConfig::default()), PerceptState::Normal);
    }

    #[test]
    fn infinity_is_warning() {
        let obs = Observation::sample(1.0, &[("y", f64::INFINITY)]);
        let p = perceive(&act(), &obs, &PerceptionConfig::default());
        assert_eq!(p.state, PerceptState::Warning);
        let alert = raise_alert(&p, &obs, &MonitorRecord::default()).unwrap();
        assert_eq!(alert.cause, "nan_divergence");
    }

    #[test]
    fn stderr_is_error_and_dominates() {
        let mut obs = Observation::stderr("Function 'odefun' not recognized");
        obs.trajectory = Observation::sample(0.0, &[("y", f64::NAN)]).trajectory;
        let p = perceive(&act(), &obs, &PerceptionConfig::default());
        assert_eq!(p.state, PerceptState::Error);
        let alert = raise_alert(&p, &obs, &MonitorRecord::default()).unwrap();
        assert_eq!(alert.detail.as_deref(), Some("Function 'odefun' not recognized"));
    }

    #[test]
    fn event_classes() {
        let cfg = PerceptionConfig::default();
        for (ev, want) in [
            ("stiffness", PerceptState::Warning),
            ("algebraic_loop", PerceptState::Warning),
            ("encoding_degraded", PerceptState::Warning),
            ("solver_abort", PerceptState::Error),
            ("checkpoint", PerceptState::Normal),
        ] {
            assert_eq!(classify(&act(), &Observation::event(ev, Payload::new()), &cfg), want, "{ev}");
        }
    }

    #[test]
    fn own_interrupt_is_not_an_error() {
        let data = crate::message::payload([("reason", json!("interrupted"))]);
        let obs = Observation::event("operation_failed", data);
        let mut cfg = PerceptionConfig::default();
        assert_eq!(classify(&act(), &obs, &cfg), PerceptState::Error);
        cfg.self_interrupted = true;
        assert_eq!(classify(&act(), &obs, &cfg), PerceptState::Normal);
    }

    #[test]
    fn streaming_overshoot_alerts_at_bound() {
        let cfg = PerceptionConfig::new(&[overshoot()]).unwrap();
        let at = |y| classify(&act(), &Observation::sample(1.0, &[("y", y)]), &cfg);
        assert_eq!(at(1.19), PerceptState::Normal);
        assert_eq!(at(1.2), PerceptState::Normal);
        assert_eq!(at(1.2001), PerceptState::Warning);
    }

    #[test]
    fn early_warning_factor_moves_threshold() {
        let mut cfg = PerceptionConfig::new(&[overshoot()]).unwrap();
        cfg.early_warning_factor = 0.9;
        let obs = Observation::sample(1.0, &[("y", 1.19)]);
        assert_eq!(classify(&act(), &obs, &cfg), PerceptState::Warning);
    }

    #[test]
    fn monotone_response_has_no_violation() {
        let stream: Vec<Observation> = (0..=1000)
            .map(|i| {
                let t = i as f64 * 0.01;
                Observation::sample(t, &[("y", 1.0 - libm::exp(-t))])
            })
            .collect();
        let rec = monitor_constraints(&stream, &[overshoot()]).unwrap();
        assert!(rec.violation_events.is_empty());
    }

    #[test]
    fn overshooting_response_violates_once_at_first_crossing() {
        // Second-order underdamped response peaking near 1.35.
        let (zeta, wn) = (0.3155, 1.0);
        let wd = wn * libm::sqrt(1.0 - zeta * zeta);
        let phi = libm::acos(zeta);
        let y = |t: f64| 1.0 - libm::exp(-zeta * wn * t) * libm::sin(wd * t + phi) / libm::sqrt(1.0 - zeta * zeta);
        let stream: Vec<Observation> =
            (0..=2000).map(|i| Observation::sample(i as f64 * 0.01, &[("y", y(i as f64 * 0.01))])).collect();
        let rec = monitor_constraints(&stream, &[overshoot()]).unwrap();
        assert_eq!(rec.violation_events.len(), 1);
        let first = stream
            .iter()
            .find(|o| o.trajectory.as_ref().unwrap().variables["y"] > 1.2)
            .unwrap()
            .trajectory
            .as_ref()
            .unwrap()
            .sim_time;
        assert_eq!(rec.violation_events[0].sim_time, first);
        assert!((rec.worst_observed["overshoot"] - 35.0).abs() < 0.5);
    }

    #[test]
    fn empty_stream_gives_empty_record() {
        let rec = monitor_constraints(&[], &[overshoot()]).unwrap();
        assert_eq!(rec, MonitorRecord::default());
    }

    #[test]
    fn terminal_constraint_cannot_stream() {
        let c = Constraint::new("ts", "settling_time", Relation::Lt, 5.0, "s").streaming();
        assert!(monitor_constraints(&[], &[c]).is_err());
    }
}
