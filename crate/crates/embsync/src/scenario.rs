//! Scenario files: intent, plant, constraints, policy and budgets in one
//! JSON document, checked before any connection is opened.

use std::path::Path;

use embsync_core::backend::{builtin_registry, tf_from_value};
use embsync_core::constraint::{validate_constraints, Constraint};
use embsync_core::controller::{policy_by_id, EpisodeConfig, Intent, Policy, DEFAULT_HOTFIX_BUDGET, DEFAULT_MAX_TURNS, POLICY_IDS};
use embsync_core::message::Payload;
use embsync_core::server::ServerConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("scenario does not parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

fn d_max_turns() -> usize {
    DEFAULT_MAX_TURNS
}
fn d_hotfix() -> usize {
    DEFAULT_HOTFIX_BUDGET
}
fn d_warning() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budgets {
    #[serde(default = "d_max_turns")]
    pub max_turns: usize,
    #[serde(default = "d_hotfix")]
    pub hotfix_budget: usize,
    /// Streaming constraints warn once margin drops below `(1 - f) * |bound|`.
    #[serde(default = "d_warning")]
    pub early_warning_factor: f64,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            max_turns: d_max_turns(),
            hotfix_budget: d_hotfix(),
            early_warning_factor: d_warning(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub id: String,
    /// Initial workspace entries the policy reads, such as starting gains.
    #[serde(default)]
    pub parameters: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub plant: Option<Value>,
    #[serde(default)]
    pub constraints: Vec<Constraint>,
    pub policy: PolicySpec,
    /// Further workspace entries.
    #[serde(default)]
    pub parameters: Payload,
    #[serde(default)]
    pub budgets: Budgets,
    /// Server and session overrides, same keys as the serve config file.
    #[serde(default)]
    pub session: Payload,
}

/// Everything a run needs, already validated.
pub struct Prepared {
    pub name: String,
    pub intent: Intent,
    pub policy: Box<dyn Policy>,
    pub episode: EpisodeConfig,
    pub server: ServerConfig,
}

impl ScenarioFile {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn prepare(&self) -> Result<Prepared, ScenarioError> {
        let invalid = |m: String| ScenarioError::Invalid(m);
        validate_constraints(&self.constraints).map_err(|e| invalid(e.to_string()))?;
        let policy = policy_by_id(&self.policy.id)
            .ok_or_else(|| invalid(format!("unknown policy {:?}; known: {POLICY_IDS:?}", self.policy.id)))?;
        let b = &self.budgets;
        if !(b.early_warning_factor > 0.0 && b.early_warning_factor <= 1.0) {
            return Err(invalid("early_warning_factor must lie in (0, 1]".into()));
        }
        let server = server_config(&self.session)?;

        let mut parameters = self.parameters.clone();
        for (k, v) in &self.policy.parameters {
            parameters.insert(k.clone(), v.clone());
        }
        if let Some(plant) = &self.plant {
            tf_from_value(plant).map_err(|e| invalid(format!("plant: {e}")))?;
            parameters.insert("plant".into(), plant.clone());
        }

        let mut episode = EpisodeConfig::new(builtin_registry().names());
        episode.max_turns = b.max_turns;
        episode.hotfix_budget = b.hotfix_budget;
        episode.early_warning_factor = b.early_warning_factor;
        Ok(Prepared {
            name: self.name.clone(),
            intent: Intent {
                description: self.description.clone(),
                constraints: self.constraints.clone(),
                parameters,
            },
            policy,
            episode,
            server,
        })
    }
}

/// Default server config with `overrides` applied key by key.
pub fn server_config(overrides: &Payload) -> Result<ServerConfig, ScenarioError> {
    let mut v = serde_json::to_value(ServerConfig::default())?;
    let obj = v.as_object_mut().expect("config serializes to an object");
    for (k, x) in overrides {
        obj.insert(k.clone(), x.clone());
    }
    let cfg: ServerConfig = serde_json::from_value(v).map_err(|e| ScenarioError::Invalid(format!("session: {e}")))?;
    cfg.session
        .validate()
        .map_err(|e| ScenarioError::Invalid(format!("session: {}", e.0)))?;
    Ok(cfg)
}
