//! Named binary predicates over terminal metrics or streaming variables.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{Margins, StepMetrics};

pub const SETTLING_TIME: &str = "settling_time";
pub const OVERSHOOT: &str = "overshoot";
pub const STEADY_STATE_ERROR: &str = "steady_state_error";
pub const GAIN_MARGIN: &str = "gain_margin";
pub const PHASE_MARGIN: &str = "phase_margin";

/// Metrics that only exist once a run has terminated.
pub const TERMINAL_ONLY: [&str; 4] = [SETTLING_TIME, STEADY_STATE_ERROR, GAIN_MARGIN, PHASE_MARGIN];

pub const DEFAULT_EQ_TOLERANCE: f64 = 1e-3;

/// Terminal metric values keyed by metric name.
pub type MetricTable = BTreeMap<String, f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = "==")]
    Eq,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    Threshold,
    Equality,
    Margin,
}

fn default_tolerance() -> f64 {
    DEFAULT_EQ_TOLERANCE
}

fn default_variable() -> String {
    "y".into()
}

fn default_reference() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Constraint {
    pub name: String,
    pub metric: String,
    pub op: Relation,
    pub bound: f64,
    #[serde(default)]
    pub units: String,
    #[serde(default)]
    pub streaming: bool,
    /// Half-width of the acceptance band for `==`.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Trajectory variable a streaming overshoot constraint watches.
    #[serde(default = "default_variable")]
    pub variable: String,
    /// Reference level for streaming overshoot.
    #[serde(default = "default_reference")]
    pub reference: f64,
}

impl Constraint {
    pub fn new(name: &str, metric: &str, op: Relation, bound: f64, units: &str) -> Self {
        Self {
            name: name.into(),
            metric: metric.into(),
            op,
            bound,
            units: units.into(),
            streaming: false,
            tolerance: DEFAULT_EQ_TOLERANCE,
            variable: default_variable(),
            reference: default_reference(),
        }
    }

    pub fn streaming(mut self) -> Self {
        self.streaming = true;
        self
    }

    pub fn kind(&self) -> ConstraintKind {
        if self.op == Relation::Eq {
            ConstraintKind::Equality
        } else if self.metric == GAIN_MARGIN || self.metric == PHASE_MARGIN {
            ConstraintKind::Margin
        } else {
            ConstraintKind::Threshold
        }
    }

    /// Signed distance to the bound, positive when satisfied. NaN observations
    /// are infinitely bad.
    pub fn margin(&self, observed: f64) -> f64 {
        if observed.is_nan() {
            return f64::NEG_INFINITY;
        }
        match self.op {
            Relation::Lt => self.bound - observed,
            Relation::Gt => observed - self.bound,
            Relation::Eq => self.tolerance - (observed - self.bound).abs(),
        }
    }

    pub fn indicator(&self, observed: f64) -> bool {
        if observed.is_nan() {
            return false;
        }
        match self.op {
            Relation::Lt => observed < self.bound,
            Relation::Gt => observed > self.bound,
            Relation::Eq => (observed - self.bound).abs() <= self.tolerance,
        }
    }

    /// The value a streaming constraint reads off one trajectory sample.
    pub fn streaming_value(&self, variables: &BTreeMap<String, f64>) -> Option<f64> {
        if self.metric == OVERSHOOT {
            let y = *variables.get(&self.variable)?;
            Some((y - self.reference) / self.reference.abs() * 100.0)
        } else {
            variables.get(&self.metric).copied()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConstraintError {
    #[error("duplicate constraint name {0:?}")]
    DuplicateName(String),
    #[error("constraint {0:?} has a non-finite bound")]
    NonFiniteBound(String),
    #[error("constraint {0:?}: metric {1:?} is terminal-only and cannot stream")]
    NotStreamable(String, String),
    #[error("constraint {0:?}: overshoot reference must be nonzero")]
    ZeroReference(String),
}

/// Rejects constraint sets that cannot be evaluated, before anything runs.
pub fn validate_constraints(constraints: &[Constraint]) -> Result<(), ConstraintError> {
    let mut names = BTreeSet::new();
    for c in constraints {
        if !names.insert(c.name.as_str()) {
            return Err(ConstraintError::DuplicateName(c.name.clone()));
        }
        if !c.bound.is_finite() || !(c.tolerance >= 0.0) {
            return Err(ConstraintError::NonFiniteBound(c.name.clone()));
        }
        if c.streaming && TERMINAL_ONLY.contains(&c.metric.as_str()) {
            return Err(ConstraintError::NotStreamable(c.name.clone(), c.metric.clone()));
        }
        if c.streaming && c.metric == OVERSHOOT && c.reference == 0.0 {
            return Err(ConstraintError::ZeroReference(c.name.clone()));
        }
    }
    Ok(())
}

/// Standard metric names from one step response and one margin analysis.
pub fn metric_table(step: &StepMetrics, margins: &Margins) -> MetricTable {
    let mut t = MetricTable::new();
    t.insert(SETTLING_TIME.into(), step.settling_time_s);
    t.insert(OVERSHOOT.into(), step.overshoot_pct);
    t.insert(STEADY_STATE_ERROR.into(), step.steady_state_error);
    t.insert(GAIN_MARGIN.into(), margins.gain_margin_db);
    t.insert(PHASE_MARGIN.into(), margins.phase_margin_deg);
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintResult {
    pub name: String,
    pub metric: String,
    pub op: Relation,
    pub bound: f64,
    /// `None` when the metric was never measured.
    pub observed: Option<f64>,
    pub indicator: bool,
    pub margin: f64,
}

impl ConstraintResult {
    pub fn unverified(&self) -> bool {
        self.observed.is_none()
    }
}

/// Indicator and signed margin for every constraint. Missing metrics count as
/// unsatisfied.
pub fn evaluate_constraints(metrics: &MetricTable, constraints: &[Constraint]) -> Vec<ConstraintResult> {
    constraints
        .iter()
        .map(|c| {
            let observed = metrics.get(&c.metric).copied();
            let (indicator, margin) = match observed {
                Some(v) => (c.indicator(v), c.margin(v)),
                None => (false, f64::NEG_INFINITY),
            };
            ConstraintResult {
                name: c.name.clone(),
                metric: c.metric.clone(),
                op: c.op,
                bound: c.bound,
                observed,
                indicator,
                margin,
            }
        })
        .collect()
}

/// The five constraints of the levitation case study.
pub fn case_study_constraints() -> Vec<Constraint> {
    alloc::vec![
        Constraint::new(SETTLING_TIME, SETTLING_TIME, Relation::Lt, 5.0, "s"),
        Constraint::new(OVERSHOOT, OVERSHOOT, Relation::Lt, 20.0, "%"),
        Constraint::new(STEADY_STATE_ERROR, STEADY_STATE_ERROR, Relation::Eq, 0.0, ""),
        Constraint::new(GAIN_MARGIN, GAIN_MARGIN, Relation::Gt, 10.0, "dB"),
        Constraint::new(PHASE_MARGIN, PHASE_MARGIN, Relation::Gt, 45.0, "deg"),
    ]
}
