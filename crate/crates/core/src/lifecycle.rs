//! Lifecycle state machine shared by services and tasks.
//!
//! Services walk `NEW → SCHEDULED → LAUNCHING → INITIALIZING → READY → DONE`;
//! tasks take `RUNNING` in place of `INITIALIZING → READY`. `FAILED` and
//! `CANCELED` are reachable from every non-terminal state. Terminal states
//! have no outgoing edges.

use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LifecycleState {
    New,
    Scheduled,
    Launching,
    Initializing,
    Ready,
    Running,
    Done,
    Failed,
    Canceled,
}

impl LifecycleState {
    pub const ALL: [LifecycleState; 9] = [
        Self::New,
        Self::Scheduled,
        Self::Launching,
        Self::Initializing,
        Self::Ready,
        Self::Running,
        Self::Done,
        Self::Failed,
        Self::Canceled,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Done | Self::Failed | Self::Canceled)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::New => "NEW",
            Self::Scheduled => "SCHEDULED",
            Self::Launching => "LAUNCHING",
            Self::Initializing => "INITIALIZING",
            Self::Ready => "READY",
            Self::Running => "RUNNING",
            Self::Done => "DONE",
            Self::Failed => "FAILED",
            Self::Canceled => "CANCELED",
        }
    }
}

impl fmt::Display for LifecycleState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Service,
    Task,
}

fn forward_step(kind: Option<EntityKind>, from: LifecycleState, to: LifecycleState) -> bool {
    use LifecycleState::*;
    let service = kind != Some(EntityKind::Task);
    let task = kind != Some(EntityKind::Service);
    match (from, to) {
        (New, Scheduled) | (Scheduled, Launching) => true,
        (Launching, Initializing) | (Initializing, Ready) | (Ready, Done) => service,
        (Launching, Running) | (Running, Done) => task,
        _ => false,
    }
}

/// True iff `from → to` is a legal step for either entity kind.
pub fn validate_transition(from: LifecycleState, to: LifecycleState) -> bool {
    if from.is_terminal() {
        return false;
    }
    matches!(to, LifecycleState::Failed | LifecycleState::Canceled) || forward_step(None, from, to)
}

/// Like [`validate_transition`] but restricted to one entity kind's path.
pub fn validate_transition_for(kind: EntityKind, from: LifecycleState, to: LifecycleState) -> bool {
    if from.is_terminal() {
        return false;
    }
    matches!(to, LifecycleState::Failed | LifecycleState::Canceled)
        || forward_step(Some(kind), from, to)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("illegal {kind:?} transition {from} -> {to}")]
pub struct IllegalTransition {
    pub kind: EntityKind,
    pub from: LifecycleState,
    pub to: LifecycleState,
}

/// Current state plus the path taken to reach it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lifecycle {
    kind: EntityKind,
    history: Vec<LifecycleState>,
}

impl Lifecycle {
    pub fn new(kind: EntityKind) -> Self {
        Self {
            kind,
            history: alloc::vec![LifecycleState::New],
        }
    }

    pub fn kind(&self) -> EntityKind {
        self.kind
    }

    pub fn state(&self) -> LifecycleState {
        *self.history.last().expect("history starts with NEW")
    }

    pub fn history(&self) -> &[LifecycleState] {
        &self.history
    }

    pub fn advance(&mut self, to: LifecycleState) -> Result<(), IllegalTransition> {
        let from = self.state();
        if !validate_transition_for(self.kind, from, to) {
            return Err(IllegalTransition {
                kind: self.kind,
                from,
                to,
            });
        }
        self.history.push(to);
        Ok(())
    }
}
