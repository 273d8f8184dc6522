use std::collections::{BTreeMap, BTreeSet};

use serde_json::json;

use crate::app::{next_state, AppState, Command, OpResult, StateUpdate};
use crate::kernel::ProcessId;
use crate::multiconsensus::{McEvent, RoundId};
use crate::specs::{Payload, Slot};

use super::env::Env;
use super::Msg;

/// Application replica: learns decisions, applies them in slot order and,
/// for passive protocols, computes state updates on its shadow state.
#[derive(Debug, Clone)]
pub(crate) struct ReplicaCore {
    pub id: ProcessId,
    pub state: AppState,
    pub version: Slot,
    pub learned: BTreeMap<Slot, Payload>,
    pub shadow: AppState,
    pub shadow_version: Slot,
}

impl ReplicaCore {
    pub fn new(id: ProcessId, initial: AppState) -> Self {
        Self {
            id,
            state: initial.clone(),
            version: 1,
            learned: BTreeMap::new(),
            shadow: initial,
            shadow_version: 1,
        }
    }

    /// Learn a decided slot. Returns false if it was already known.
    pub fn observe(&mut self, env: &mut Env, slot: Slot, payload: &Payload) -> bool {
        if let Some(known) = self.learned.get(&slot) {
            if known != payload {
                env.violations
                    .push(format!("{} learned {known} and {payload} for slot {slot}", self.id));
            }
            return false;
        }
        env.mc(
            self.id,
            McEvent::ObserveDecision {
                replica: self.id,
                slot,
                payload: payload.clone(),
            },
        );
        self.learned.insert(slot, payload.clone());
        true
    }

    /// Apply every learned slot that is next in order.
    pub fn apply_ready(&mut self, env: &mut Env) -> Vec<(Command, OpResult)> {
        let mut out = Vec::new();
        while let Some(p) = self.learned.get(&self.version).cloned() {
            let (cmd, result, new_state) = match p {
                Payload::Command(c) => {
                    let (r, s) = next_state(&self.state, &c);
                    (c, r, s)
                }
                Payload::Update(u) => (u.cmd, u.result, u.new),
            };
            env.mc(
                self.id,
                McEvent::Update {
                    replica: self.id,
                    cmd: cmd.clone(),
                    result: result.clone(),
                    new_state: new_state.clone(),
                },
            );
            self.state = new_state;
            self.version += 1;
            out.push((cmd, result));
        }
        out
    }

    /// Compute a state update on the shadow and propose it for the next
    /// shadow slot.
    pub fn propose_update(&mut self, env: &mut Env, cmd: &Command) -> (Slot, Payload) {
        let u = StateUpdate::compute(&self.shadow, cmd);
        let slot = self.shadow_version;
        let payload = Payload::Update(u.clone());
        env.mc(
            self.id,
            McEvent::Propose {
                replica: self.id,
                slot,
                payload: payload.clone(),
            },
        );
        self.shadow = u.new;
        self.shadow_version += 1;
        (slot, payload)
    }

    pub fn reset_shadow(&mut self, env: &mut Env, version: Slot, state: AppState) {
        env.mc(
            self.id,
            McEvent::ResetShadow {
                replica: self.id,
                version,
                state: state.clone(),
            },
        );
        self.shadow = state;
        self.shadow_version = version;
    }
}

/// The state after the last update of a passive log.
pub(crate) fn fold_updates(initial: &AppState, log: &[Payload]) -> AppState {
    log.iter()
        .rev()
        .find_map(|p| p.as_update().map(|u| u.new.clone()))
        .unwrap_or_else(|| initial.clone())
}

/// A stand-alone Paxos replica.
pub(crate) struct ReplicaNode {
    pub core: ReplicaCore,
    /// Broadcast-learn certifications seen, per slot and round.
    votes: BTreeMap<(Slot, RoundId), BTreeMap<Payload, BTreeSet<ProcessId>>>,
    leader: Option<ProcessId>,
}

impl ReplicaNode {
    pub fn new(id: ProcessId, initial: AppState) -> Self {
        Self {
            core: ReplicaCore::new(id, initial),
            votes: BTreeMap::new(),
            leader: None,
        }
    }

    pub fn on_msg(&mut self, env: &mut Env, from: ProcessId, msg: Msg) {
        let id = self.core.id;
        let learned = match msg {
            Msg::Decide { slot, payload } => {
                self.leader = Some(from);
                self.core.observe(env, slot, &payload)
            }
            Msg::Cert { round, slot, payload } => {
                self.leader = Some(ProcessId::certifier(round.id));
                let who = self
                    .votes
                    .entry((slot, round))
                    .or_default()
                    .entry(payload.clone())
                    .or_default();
                who.insert(from);
                let count = who.len();
                env.is_majority(count) && self.core.observe(env, slot, &payload)
            }
            other => {
                env.note(id, "ignored", json!({"label": other.label(), "from": from}));
                false
            }
        };
        if learned {
            for (cmd, result) in self.core.apply_ready(env) {
                env.send(
                    id,
                    &[cmd.client],
                    Msg::Reply {
                        op: cmd.op.id,
                        result,
                        leader: self.leader,
                    },
                );
            }
        }
    }
}
