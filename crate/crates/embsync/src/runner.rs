//! One scenario run end to end: validate, connect, run the episode, write
//! the audit log and the report.

use std::path::{Path, PathBuf};

use embsync_core::backend::builtin_registry;
use embsync_core::client::{Client, ClientError, Clock, ManualClock, Transport};
use embsync_core::controller::{run_episode, EpisodeError};
use embsync_core::loopback::Loopback;
use embsync_core::message::EnhancedMessage;
use embsync_core::server::{ServerConfig, ServerCore};
use serde_json::Value;
use thiserror::Error;

use crate::audit::{read_log, write_log, AuditError};
use crate::clock::SystemClock;
use crate::ids::SeededIds;
use crate::report::{build_report, report_document};
use crate::scenario::{Prepared, ScenarioError, ScenarioFile};
use crate::ws::{spawn_background, WsTransport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    Inproc,
    Ws,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub scenario: PathBuf,
    pub transport: TransportKind,
    pub report: PathBuf,
    /// Defaults to the report path with an `.audit.jsonl` extension.
    pub audit: Option<PathBuf>,
    /// Existing server; without one a ws run starts its own on loopback.
    pub url: Option<String>,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("episode rejected: {0}")]
    Episode(EpisodeError),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("cannot write {path}: {source}")]
    Write { path: String, source: std::io::Error },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Scenario(_) | RunError::Episode(_) => 2,
            RunError::Transport(_) => 3,
            RunError::Audit(_) | RunError::Write { .. } => 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub success: bool,
    /// Report body as written.
    pub report: Value,
    pub audit_path: PathBuf,
    /// Set when the episode aborted on a transport failure; the report is partial.
    pub transport_error: Option<String>,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        match (&self.transport_error, self.success) {
            (Some(_), _) => 3,
            (None, true) => 0,
            (None, false) => 1,
        }
    }
}

pub fn default_audit_path(report: &Path) -> PathBuf {
    report.with_extension("audit.jsonl")
}

fn write_json(path: &Path, v: &Value) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(v).expect("json value serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|source| RunError::Write {
        path: path.display().to_string(),
        source,
    })
}

/// Writes the log, then derives the report from the file so that replay
/// sees exactly what the run saw.
fn persist(trajectory: &[EnhancedMessage], audit: &Path, report: &Path) -> Result<Value, RunError> {
    write_log(audit, trajectory).map_err(|source| RunError::Write {
        path: audit.display().to_string(),
        source,
    })?;
    let body = replay(audit)?;
    write_json(report, &report_document(&audit.display().to_string(), body.clone()))?;
    Ok(body)
}

fn episode<T: Transport, C: Clock>(
    mut client: Client<T, C>,
    mut prepared: Prepared,
    audit: &Path,
    report: &Path,
) -> Result<RunOutcome, RunError> {
    if let Err(e) = client.connect() {
        let trajectory = client.take_audit();
        return transport_abort(e, &trajectory, audit, report);
    }
    match run_episode(&prepared.intent, &mut client, prepared.policy.as_mut(), &prepared.episode) {
        Ok(result) => {
            let body = persist(&result.trajectory, audit, report)?;
            Ok(RunOutcome {
                success: result.success,
                report: body,
                audit_path: audit.to_path_buf(),
                transport_error: None,
            })
        }
        Err(EpisodeError::Transport { source, checkpoint }) => transport_abort(source, &checkpoint.trajectory, audit, report),
        Err(e) => Err(RunError::Episode(e)),
    }
}

fn transport_abort(e: ClientError, trajectory: &[EnhancedMessage], audit: &Path, report: &Path) -> Result<RunOutcome, RunError> {
    if trajectory.is_empty() {
        return Err(RunError::Transport(e.to_string()));
    }
    let body = persist(trajectory, audit, report)?;
    Ok(RunOutcome {
        success: false,
        report: body,
        audit_path: audit.to_path_buf(),
        transport_error: Some(e.to_string()),
    })
}

fn server_core(cfg: ServerConfig, seed: u64) -> ServerCore {
    // Server ids come from a stream separate from the client's.
    ServerCore::new(cfg, builtin_registry(), Box::new(SeededIds::new(seed ^ 0x5eed_5e4e_e000_0001)))
}

pub fn run_scenario(opts: &RunOptions) -> Result<RunOutcome, RunError> {
    let scenario = ScenarioFile::load(&opts.scenario)?;
    let prepared = scenario.prepare()?;
    let audit = opts.audit.clone().unwrap_or_else(|| default_audit_path(&opts.report));
    let session_cfg = prepared.server.session.clone();
    let name = prepared.name.clone();
    let ids = Box::new(SeededIds::new(opts.seed));
    match opts.transport {
        TransportKind::Inproc => {
            let clock = ManualClock::new(0.0);
            let lb = Loopback::new(server_core(prepared.server.clone(), opts.seed), clock.clone());
            let client = Client::new(lb, clock, session_cfg, &name, ids);
            episode(client, prepared, &audit, &opts.report)
        }
        TransportKind::Ws => {
            let (url, _server) = match &opts.url {
                Some(u) => (u.clone(), None),
                None => {
                    let bg = spawn_background(server_core(prepared.server.clone(), opts.seed), "127.0.0.1:0")
                        .map_err(|e| RunError::Transport(e.to_string()))?;
                    (bg.url(), Some(bg))
                }
            };
            let t = WsTransport::connect(&url).map_err(|e| RunError::Transport(e.to_string()))?;
            let client = Client::new(t, SystemClock::new(), session_cfg, &name, ids);
            episode(client, prepared, &audit, &opts.report)
        }
    }
}

/// Recomputes the report body from a log on disk.
pub fn replay(path: &Path) -> Result<Value, AuditError> {
    let log = read_log(path)?;
    let mut body = build_report(&log.messages);
    if log.truncated {
        body["partial"] = Value::Bool(true);
    }
    Ok(body)
}
