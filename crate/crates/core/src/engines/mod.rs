//! Message-driven Paxos, VSR and Zab engines on the simulated network.
//!
//! Every engine step that realizes a multi-consensus transition is traced
//! under that transition's name with the same parameters; everything else
//! (sends, heartbeats, timeouts, speculative execution) is traced as a
//! named stutter. An online monitor replays the multi-consensus part of the
//! trace as it is produced.

mod certifier;
mod client;
mod env;
mod paxos;
mod replica;
mod scenario;
mod sim;
mod vsr;
mod zab;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::app::{Command, OpId, OpResult};
use crate::kernel::{PoolTag, ProcessId};
use crate::multiconsensus::{RoundId, Snapshot};
use crate::specs::{Payload, Slot};

pub use scenario::{
    AppSpec, BackoffPolicy, ConfigError, CrashAt, CrashTrigger, Dissemination, NetworkSpec, OpMix, Protocol,
    Scenario, TimerSpec, Timers, WorkloadSpec,
};
pub use sim::{run, RunResult};

/// Round-stamp: round of the held log and the number of slots in it.
pub type RoundStamp = (RoundId, u64);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "msg")]
pub enum Msg {
    Request {
        cmd: Command,
    },
    Reply {
        op: OpId,
        result: OpResult,
        leader: Option<ProcessId>,
    },
    CertSeq {
        round: RoundId,
        slot: Slot,
        payload: Payload,
    },
    Cert {
        round: RoundId,
        slot: Slot,
        payload: Payload,
    },
    Decide {
        slot: Slot,
        payload: Payload,
    },
    Heartbeat {
        round: RoundId,
        stalled: bool,
    },
    Support {
        round: RoundId,
    },
    Snapshot {
        snap: Snapshot,
    },
    EpochQuery,
    Epoch {
        round: RoundId,
    },
    Stamp {
        round: RoundId,
        stamp: RoundStamp,
    },
    Fetch {
        round: RoundId,
        have: RoundStamp,
    },
    Sync {
        round: RoundId,
        full: bool,
        from_slot: Slot,
        entries: Vec<Payload>,
    },
    NewView {
        round: RoundId,
        log: Vec<Payload>,
        dm: BTreeSet<ProcessId>,
    },
    Ack {
        round: RoundId,
    },
    Commit {
        round: RoundId,
        upto: Slot,
    },
    Suspect {
        round: RoundId,
    },
    Nominate,
    Appoint {
        round: RoundId,
        dm: BTreeSet<ProcessId>,
    },
}

impl Msg {
    pub fn label(&self) -> &'static str {
        match self {
            Msg::Request { .. } => "PROPOSE",
            Msg::Reply { .. } => "REPLY",
            Msg::CertSeq { .. } => "CERTSEQ",
            Msg::Cert { .. } => "CERT",
            Msg::Decide { .. } => "DECIDE",
            Msg::Heartbeat { .. } => "HEARTBEAT",
            Msg::Support { .. } => "SUPPORT",
            Msg::Snapshot { .. } => "SNAPSHOT",
            Msg::EpochQuery | Msg::Epoch { .. } => "EPOCH",
            Msg::Stamp { .. } => "STAMP",
            Msg::Fetch { .. } | Msg::Sync { .. } => "SYNC",
            Msg::NewView { .. } => "NEWVIEW",
            Msg::Ack { .. } => "ACK",
            Msg::Commit { .. } => "COMMIT",
            Msg::Suspect { .. } => "SUSPECT",
            Msg::Nominate => "NOMINATE",
            Msg::Appoint { .. } => "APPOINT",
        }
    }

    pub fn tag(&self) -> PoolTag {
        match self {
            Msg::Request { .. } => PoolTag::Input,
            Msg::Reply { .. } => PoolTag::Output,
            Msg::CertSeq { .. } | Msg::Cert { .. } | Msg::Decide { .. } => PoolTag::Certified,
            Msg::Snapshot { .. } | Msg::Stamp { .. } => PoolTag::Snapshot,
            _ => PoolTag::Protocol,
        }
    }

    pub fn slot(&self) -> Option<Slot> {
        match self {
            Msg::CertSeq { slot, .. } | Msg::Cert { slot, .. } | Msg::Decide { slot, .. } => Some(*slot),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Timer {
    Start,
    Tick,
    ClientRetry { op: OpId },
    Nominate,
}
