//! Per-operation status machine, timeouts and tracker garbage collection.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::message::OperationStatus;

pub const DEFAULT_OPERATION_TIMEOUT_S: f64 = 600.0;
pub const DEFAULT_GC_DELTA_S: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LifecycleEvent {
    Ack,
    Start,
    Progress,
    Done,
    Error,
    Timeout,
    InterruptAck,
}

impl LifecycleEvent {
    pub const ALL: [LifecycleEvent; 7] = [
        LifecycleEvent::Ack,
        LifecycleEvent::Start,
        LifecycleEvent::Progress,
        LifecycleEvent::Done,
        LifecycleEvent::Error,
        LifecycleEvent::Timeout,
        LifecycleEvent::InterruptAck,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LifecycleEvent::Ack => "ack",
            LifecycleEvent::Start => "start",
            LifecycleEvent::Progress => "progress",
            LifecycleEvent::Done => "done",
            LifecycleEvent::Error => "error",
            LifecycleEvent::Timeout => "timeout",
            LifecycleEvent::InterruptAck => "interrupt_ack",
        }
    }
}

impl fmt::Display for LifecycleEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("illegal transition: {state} --{event}-->")]
pub struct TransitionError {
    pub state: OperationStatus,
    pub event: LifecycleEvent,
}

/// The full edge list of the operation status machine.
pub fn apply_transition(
    state: OperationStatus,
    event: LifecycleEvent,
) -> Result<OperationStatus, TransitionError> {
    use LifecycleEvent as E;
    use OperationStatus as S;
    let next = match (state, event) {
        (S::Pending, E::Ack) => S::Acknowledged,
        (S::Acknowledged, E::Start) => S::Started,
        (S::Started | S::InProgress, E::Progress) => S::InProgress,
        (S::Started | S::InProgress, E::Done) => S::Completed,
        (S::Started | S::InProgress, E::Error) => S::Failed,
        (S::Acknowledged | S::Started | S::InProgress, E::Timeout) => S::Failed,
        (S::Started | S::InProgress, E::InterruptAck) => S::Failed,
        _ => return Err(TransitionError { state, event }),
    };
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperationTracker {
    pub operation_id: String,
    state: OperationStatus,
    pub created_at: f64,
    last_activity_at: f64,
    pub timeout_s: f64,
    history: Vec<(f64, LifecycleEvent)>,
    pub pending_verifications: Vec<String>,
}

impl OperationTracker {
    pub fn new(operation_id: impl Into<String>, now: f64, timeout_s: f64) -> Self {
        Self {
            operation_id: operation_id.into(),
            state: OperationStatus::Pending,
            created_at: now,
            last_activity_at: now,
            timeout_s,
            history: Vec::new(),
            pending_verifications: Vec::new(),
        }
    }

    pub fn state(&self) -> OperationStatus {
        self.state
    }

    pub fn last_activity_at(&self) -> f64 {
        self.last_activity_at
    }

    pub fn history(&self) -> &[(f64, LifecycleEvent)] {
        &self.history
    }

    pub fn is_terminal(&self) -> bool {
        self.state.is_terminal()
    }

    /// Records activity that is not a status change (streamed output).
    pub fn touch(&mut self, now: f64) {
        if now > self.last_activity_at {
            self.last_activity_at = now;
        }
    }

    pub fn apply(&mut self, event: LifecycleEvent, now: f64) -> Result<OperationStatus, TransitionError> {
        let next = apply_transition(self.state, event)?;
        self.state = next;
        self.touch(now);
        self.history.push((self.last_activity_at, event));
        Ok(next)
    }
}

/// `Some(Timeout)` when the tracker has been idle strictly longer than its timeout.
///
/// Pending trackers are exempt: the status machine has no timeout edge out of
/// `pending`, and a pending operation has not reached the backend yet.
pub fn check_timeout(tracker: &OperationTracker, now: f64) -> Option<LifecycleEvent> {
    let eligible = matches!(
        tracker.state,
        OperationStatus::Acknowledged | OperationStatus::Started | OperationStatus::InProgress
    );
    (eligible && now - tracker.last_activity_at > tracker.timeout_s).then_some(LifecycleEvent::Timeout)
}

fn gc_eligible(tracker: &OperationTracker, now: f64, delta_s: f64) -> bool {
    now - tracker.last_activity_at > tracker.timeout_s + delta_s
}

/// Removes every tracker idle longer than `timeout_s + delta_s`.
pub fn collect_garbage(
    trackers: &mut BTreeMap<String, OperationTracker>,
    now: f64,
    delta_s: f64,
) -> Vec<String> {
    let removed: Vec<String> = trackers
        .values()
        .filter(|t| gc_eligible(t, now, delta_s))
        .map(|t| t.operation_id.clone())
        .collect();
    for id in &removed {
        trackers.remove(id);
    }
    removed
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Sweep {
    pub timed_out: Vec<String>,
    pub removed: Vec<String>,
}

/// Timeout pass followed by a GC pass, so nothing disappears without first
/// reaching a terminal state (where the machine allows it).
pub fn sweep(trackers: &mut BTreeMap<String, OperationTracker>, now: f64, delta_s: f64) -> Sweep {
    let mut timed_out = Vec::new();
    for tracker in trackers.values_mut() {
        if let Some(event) = check_timeout(tracker, now) {
            // Timestamp the failure at the instant the timeout elapsed, so
            // the GC clock still anchors on the last real activity.
            let at = tracker.last_activity_at;
            if tracker.apply(event, at).is_ok() {
                timed_out.push(tracker.operation_id.clone());
            }
        }
    }
    let removed = collect_garbage(trackers, now, delta_s);
    Sweep { timed_out, removed }
}
