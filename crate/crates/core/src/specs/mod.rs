//! Abstract specifications as guarded transition systems.
//!
//! Every transition is a method returning `Err(Blocked)` when its
//! precondition does not hold. A blocked transition leaves the state
//! untouched, so callers can probe enabledness by attempting it on a clone.

mod linearizable;
mod replication;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::app::{Command, StateUpdate};

pub use linearizable::{ServiceEvent, ServiceState};
pub use replication::{ReplEvent, ReplicaVars, ReplicationState, Style};

/// Slot index, starting at 1.
pub type Slot = u64;

/// What is ordered in a slot: a client command (active replication) or a
/// state update (passive replication).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Payload {
    Command(Command),
    Update(StateUpdate),
}

impl Payload {
    pub fn command(&self) -> &Command {
        match self {
            Payload::Command(c) => c,
            Payload::Update(u) => &u.cmd,
        }
    }

    pub fn as_update(&self) -> Option<&StateUpdate> {
        match self {
            Payload::Update(u) => Some(u),
            Payload::Command(_) => None,
        }
    }
}

impl fmt::Display for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Payload::Command(c) => write!(f, "{}#{}", c.client, c.op.id.0),
            Payload::Update(u) => write!(f, "{}#{}[{}->{}]", u.cmd.client, u.cmd.op.id.0, u.old, u.new.digest()),
        }
    }
}

/// A transition whose precondition is false.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{transition} blocked: {reason}")]
pub struct Blocked {
    pub transition: &'static str,
    pub reason: String,
}

pub(crate) fn blocked<T>(transition: &'static str, reason: impl Into<String>) -> Result<T, Blocked> {
    Err(Blocked {
        transition,
        reason: reason.into(),
    })
}
