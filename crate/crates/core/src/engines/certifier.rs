use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde_json::json;

use crate::app::{AppState, Command};
use crate::kernel::ProcessId;
use crate::multiconsensus::{McEvent, Progress, RoundId, Snapshot};
use crate::specs::{Payload, Slot};

use super::env::Env;
use super::replica::{fold_updates, ReplicaCore, ReplicaNode};
use super::{Dissemination, Msg, Protocol, RoundStamp, Timer};

#[derive(Debug, Clone)]
pub(crate) struct Inflight {
    pub payload: Payload,
    pub since: u64,
    pub certs: BTreeSet<ProcessId>,
}

/// Progress of a recovery this certifier is driving.
#[derive(Debug, Clone)]
pub(crate) enum Recovery {
    /// Paxos: collecting full snapshots.
    Snapshots {
        round: RoundId,
        snaps: BTreeMap<ProcessId, Snapshot>,
    },
    /// Zab: collecting supported rounds.
    Epochs { seen: BTreeMap<ProcessId, RoundId> },
    /// Zab nominee or VSR view manager: collecting round-stamps.
    Stamps {
        round: RoundId,
        stamps: BTreeMap<ProcessId, RoundStamp>,
    },
    /// Zab: waiting for missing commands from the certifier with the
    /// highest round-stamp.
    Fetching {
        round: RoundId,
        from: BTreeSet<ProcessId>,
        source: ProcessId,
        want: RoundStamp,
    },
    /// New sequencer waiting for followers to install its log.
    Installing { round: RoundId, acks: BTreeSet<ProcessId> },
}

pub(crate) struct CertNode {
    pub id: ProcessId,
    pub idx: u32,
    pub bev: RoundId,
    pub is_seq: bool,
    pub floor: RoundId,
    pub entries: BTreeMap<Slot, Progress>,
    /// Own snapshots by round.
    pub snaps: BTreeMap<RoundId, Snapshot>,
    /// The sequencer has finished recovery and may order commands.
    pub ready: bool,
    pub inflight: BTreeMap<Slot, Inflight>,
    pub pending: VecDeque<Command>,
    /// Prefix-ordered certification requests that arrived early.
    pub buffer: BTreeMap<Slot, (RoundId, Payload, ProcessId)>,
    pub last_heard: u64,
    pub recovery: Option<(u64, Recovery)>,
    pub last_suspect: Option<u64>,
    pub backoff: u64,
    /// Passive protocols: the co-located replica.
    pub replica: Option<ReplicaCore>,
    /// Co-located Paxos replica.
    pub paxos_replica: Option<ReplicaNode>,
    /// VSR designated majority of the current round.
    pub dm: BTreeSet<ProcessId>,
    /// VSR speculative replica state and its next slot.
    pub spec_state: AppState,
    pub spec_version: Slot,
    /// VSR: round this certifier last asked to move to.
    pub target: RoundId,
    pub initial: AppState,
}

impl CertNode {
    pub fn new(id: ProcessId, initial: AppState, is_seq: bool) -> Self {
        Self {
            id,
            idx: id.index,
            bev: RoundId::ZERO,
            is_seq,
            floor: RoundId::ZERO,
            entries: BTreeMap::new(),
            snaps: BTreeMap::new(),
            ready: is_seq,
            inflight: BTreeMap::new(),
            pending: VecDeque::new(),
            buffer: BTreeMap::new(),
            last_heard: 0,
            recovery: None,
            last_suspect: None,
            backoff: 0,
            replica: None,
            paxos_replica: None,
            dm: BTreeSet::new(),
            spec_state: initial.clone(),
            spec_version: 1,
            target: RoundId::ZERO,
            initial,
        }
    }

    pub fn progress(&self, slot: Slot) -> Progress {
        self.entries.get(&slot).cloned().unwrap_or(Progress::empty(self.floor))
    }

    pub fn lowest_empty(&self) -> Slot {
        let limit = self.entries.keys().next_back().copied().unwrap_or(0) + 1;
        (1..=limit)
            .find(|&s| self.progress(s) == Progress::empty(self.bev))
            .unwrap_or(limit)
    }

    pub fn stamp(&self) -> RoundStamp {
        (self.floor, self.entries.len() as u64)
    }

    /// Certified payloads in slot order.
    pub fn log(&self) -> BTreeMap<Slot, Payload> {
        self.entries
            .iter()
            .filter_map(|(s, p)| p.payload.clone().map(|p| (*s, p)))
            .collect()
    }

    pub fn has_command(&self, cmd: &Command) -> bool {
        self.entries
            .values()
            .any(|p| p.payload.as_ref().is_some_and(|p| p.command() == cmd))
    }

    pub fn enqueue(&mut self, cmd: Command) {
        if !self.pending.contains(&cmd) && !self.has_command(&cmd) {
            self.pending.push_back(cmd);
        }
    }

    pub fn stalled(&self, env: &Env) -> bool {
        let limit = env.timers.progress;
        self.inflight.values().any(|i| env.now() > i.since + limit)
    }

    pub fn ignore(&self, env: &mut Env, from: ProcessId, msg: &Msg, reason: &str) {
        env.note(self.id, "ignored", json!({"label": msg.label(), "from": from, "reason": reason}));
    }

    // Multi-consensus transitions, mirrored locally.

    pub fn support(&mut self, env: &mut Env, round: RoundId, coord: ProcessId) {
        env.mc(
            self.id,
            McEvent::SupportRound {
                certifier: self.id,
                round,
                coord,
            },
        );
        let snap = Snapshot {
            certifier: self.id,
            round,
            coord,
            floor: self.floor,
            entries: self.entries.clone(),
        };
        self.snaps.insert(round, snap);
        self.bev = round;
        self.is_seq = false;
        self.ready = false;
        self.inflight.clear();
        self.buffer.retain(|_, (r, _, _)| *r >= round);
        self.last_heard = env.now();
    }

    pub fn certify_seq(&mut self, env: &mut Env, slot: Slot, payload: &Payload) {
        env.mc(
            self.id,
            McEvent::CertifySeq {
                certifier: self.id,
                slot,
                round: self.bev,
                payload: payload.clone(),
            },
        );
        self.entries.insert(slot, Progress::of(self.bev, payload.clone()));
        self.inflight.insert(
            slot,
            Inflight {
                payload: payload.clone(),
                since: env.now(),
                certs: BTreeSet::from([self.id]),
            },
        );
    }

    pub fn certify(&mut self, env: &mut Env, slot: Slot, round: RoundId, payload: &Payload) {
        env.mc(
            self.id,
            McEvent::Certify {
                certifier: self.id,
                slot,
                round,
                payload: payload.clone(),
            },
        );
        self.entries.insert(slot, Progress::of(round, payload.clone()));
    }

    pub fn recover(&mut self, env: &mut Env, coord: ProcessId, from: BTreeSet<ProcessId>, log: BTreeMap<Slot, Payload>) {
        env.mc(
            self.id,
            McEvent::Recover {
                certifier: self.id,
                round: self.bev,
                coord,
                from,
                log: Some(log.clone()),
            },
        );
        self.floor = self.bev;
        self.is_seq = true;
        self.entries = log.into_iter().map(|(s, p)| (s, Progress::of(self.bev, p))).collect();
    }

    pub fn adopt(&mut self, env: &mut Env, log: BTreeMap<Slot, Payload>) {
        env.mc(
            self.id,
            McEvent::Adopt {
                certifier: self.id,
                round: self.bev,
            },
        );
        self.floor = self.bev;
        self.entries = log.into_iter().map(|(s, p)| (s, Progress::of(self.bev, p))).collect();
    }

    // Shared engine steps.

    pub fn on_request(&mut self, env: &mut Env, cmd: Command) {
        if self.has_command(&cmd) {
            return;
        }
        if self.is_seq && self.ready {
            self.order(env, cmd);
        } else {
            self.enqueue(cmd);
        }
    }

    pub fn drain_pending(&mut self, env: &mut Env) {
        while self.is_seq && self.ready {
            let Some(cmd) = self.pending.pop_front() else {
                break;
            };
            if !self.has_command(&cmd) {
                self.order(env, cmd);
            }
        }
    }

    /// Sequencer: assign the command to the next slot and ask the other
    /// certifiers to certify it.
    fn order(&mut self, env: &mut Env, cmd: Command) {
        let round = self.bev;
        match env.protocol {
            Protocol::Paxos => {
                let slot = self.lowest_empty();
                let payload = Payload::Command(cmd);
                env.mc(
                    self.id,
                    McEvent::Propose {
                        replica: self.id,
                        slot,
                        payload: payload.clone(),
                    },
                );
                self.certify_seq(env, slot, &payload);
                self.paxos_disseminate(env, slot, payload);
            }
            Protocol::Zab | Protocol::Vsr => {
                let replica = self.replica.as_mut().expect("passive certifiers host a replica");
                let (slot, payload) = replica.propose_update(env, &cmd);
                self.certify_seq(env, slot, &payload);
                let to: Vec<ProcessId> = if env.protocol == Protocol::Vsr {
                    self.speculate(env, slot, &payload);
                    self.dm.iter().copied().filter(|&c| c != self.id).collect()
                } else {
                    env.others(self.id)
                };
                env.send(self.id, &to, Msg::CertSeq { round, slot, payload });
            }
        }
    }

    /// Paxos: send a slot's certification request and this sequencer's
    /// own certification.
    pub fn paxos_disseminate(&mut self, env: &mut Env, slot: Slot, payload: Payload) {
        let round = self.bev;
        let others = env.others(self.id);
        env.send(
            self.id,
            &others,
            Msg::CertSeq {
                round,
                slot,
                payload: payload.clone(),
            },
        );
        let to = match env.dissemination {
            Dissemination::CollectThenNotify => vec![self.id],
            Dissemination::BroadcastLearn => env.replicas.clone(),
        };
        env.send(self.id, &to, Msg::Cert { round, slot, payload });
    }

    /// Sequencer: count a certification. Returns true when it completes
    /// the quorum for the slot.
    pub fn count_cert(&mut self, env: &mut Env, from: ProcessId, round: RoundId, slot: Slot, payload: &Payload) -> bool {
        if !self.is_seq || round != self.bev {
            return false;
        }
        let Some(inf) = self.inflight.get_mut(&slot) else {
            return false;
        };
        if &inf.payload != payload {
            return false;
        }
        inf.certs.insert(from);
        let done = match env.protocol {
            Protocol::Vsr => self.dm.is_subset(&inf.certs),
            _ => env.is_majority(inf.certs.len()),
        };
        if done {
            self.inflight.remove(&slot);
            env.note(self.id, "decision_known", json!({"slot": slot, "round": round}));
        }
        done
    }

    /// Passive sequencer: learn a decided slot locally, answer clients and
    /// tell the other certifiers.
    pub fn passive_decided(&mut self, env: &mut Env, slot: Slot, payload: Payload) {
        self.learn_and_reply(env, &[(slot, payload.clone())], true);
        let others = env.others(self.id);
        env.send(self.id, &others, Msg::Decide { slot, payload });
    }

    pub fn learn_and_reply(&mut self, env: &mut Env, slots: &[(Slot, Payload)], reply: bool) {
        let Some(replica) = self.replica.as_mut() else {
            return;
        };
        for (slot, payload) in slots {
            replica.observe(env, *slot, payload);
        }
        let applied = replica.apply_ready(env);
        if reply {
            for (cmd, result) in applied {
                env.send(
                    self.id,
                    &[cmd.client],
                    Msg::Reply {
                        op: cmd.op.id,
                        result,
                        leader: Some(self.id),
                    },
                );
            }
        }
    }

    /// VSR: apply a certified update to the speculative state.
    pub fn speculate(&mut self, env: &mut Env, slot: Slot, payload: &Payload) {
        if let Some(u) = payload.as_update() {
            if slot == self.spec_version && u.is_consistent_with(&self.spec_state) {
                self.spec_state = u.new.clone();
                self.spec_version += 1;
                env.note(self.id, "speculative_apply", json!({"slot": slot}));
            }
        }
    }

    /// Prefix-ordered follower: queue a certification request and certify
    /// whatever is now next in order.
    pub fn po_certseq(&mut self, env: &mut Env, from: ProcessId, round: RoundId, slot: Slot, payload: Payload) {
        if round < self.bev {
            let msg = Msg::CertSeq { round, slot, payload };
            return self.ignore(env, from, &msg, "stale round");
        }
        self.last_heard = env.now();
        self.buffer.insert(slot, (round, payload, from));
        self.drain_buffer(env);
    }

    pub fn drain_buffer(&mut self, env: &mut Env) {
        loop {
            let mut progressed = false;
            let slots: Vec<Slot> = self.buffer.keys().copied().collect();
            for slot in slots {
                let (round, payload, from) = self.buffer[&slot].clone();
                if round < self.bev {
                    self.buffer.remove(&slot);
                    continue;
                }
                if round > self.bev || self.floor < round {
                    continue;
                }
                let next = self.entries.len() as Slot + 1;
                if slot < next {
                    self.buffer.remove(&slot);
                    if self.progress(slot).payload.as_ref() == Some(&payload) {
                        env.send(self.id, &[from], Msg::Cert { round, slot, payload });
                    }
                } else if slot == next {
                    self.buffer.remove(&slot);
                    self.certify(env, slot, round, &payload);
                    if env.protocol == Protocol::Vsr {
                        self.speculate(env, slot, &payload);
                    }
                    env.send(self.id, &[from], Msg::Cert { round, slot, payload });
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
    }

    /// Passive recovery, last step: the new sequencer resets its shadow to
    /// the recovered log and sends that log to every other certifier.
    pub fn install_as_sequencer(&mut self, env: &mut Env) {
        let round = self.bev;
        let log: Vec<Payload> = self.log().into_values().collect();
        let state = fold_updates(&self.initial, &log);
        let version = log.len() as Slot + 1;
        if let Some(r) = self.replica.as_mut() {
            r.reset_shadow(env, version, state.clone());
        }
        self.spec_state = state;
        self.spec_version = version;
        let others = env.others(self.id);
        env.send(
            self.id,
            &others,
            Msg::NewView {
                round,
                log,
                dm: self.dm.clone(),
            },
        );
        self.recovery = Some((
            env.now(),
            Recovery::Installing {
                round,
                acks: BTreeSet::from([self.id]),
            },
        ));
    }

    /// Passive follower: install a new sequencer's log.
    pub fn on_new_view(&mut self, env: &mut Env, from: ProcessId, round: RoundId, log: Vec<Payload>, dm: BTreeSet<ProcessId>) {
        if round < self.bev {
            let msg = Msg::NewView { round, log, dm };
            return self.ignore(env, from, &msg, "stale round");
        }
        if round > self.bev {
            let coord = match env.protocol {
                Protocol::Vsr => env.certifiers[round.id as usize],
                _ => from,
            };
            self.support(env, round, coord);
        }
        self.recovery = None;
        self.last_heard = env.now();
        if self.floor < round {
            let map: BTreeMap<Slot, Payload> = log.iter().cloned().zip(1..).map(|(p, s)| (s, p)).collect();
            self.adopt(env, map);
            let state = fold_updates(&self.initial, &log);
            let version = log.len() as Slot + 1;
            if env.protocol == Protocol::Vsr && (self.spec_state != state || self.spec_version != version) {
                env.note(
                    self.id,
                    "rollback",
                    json!({"from_version": self.spec_version, "to_version": version}),
                );
            }
            self.spec_state = state;
            self.spec_version = version;
            self.dm = dm;
        }
        env.send(self.id, &[from], Msg::Ack { round });
        self.drain_buffer(env);
    }

    /// New sequencer: count an install acknowledgement; once enough
    /// followers hold the log, learn it, commit it and resume ordering.
    pub fn on_ack(&mut self, env: &mut Env, from: ProcessId, round: RoundId) {
        let Some((_, Recovery::Installing { round: r, acks })) = self.recovery.as_mut() else {
            return;
        };
        if *r != round || round != self.bev {
            return;
        }
        acks.insert(from);
        let done = match env.protocol {
            Protocol::Vsr => self.dm.is_subset(acks),
            _ => env.is_majority(acks.len()),
        };
        if !done {
            return;
        }
        self.recovery = None;
        self.ready = true;
        let log: Vec<(Slot, Payload)> = self.log().into_iter().collect();
        let upto = log.len() as Slot;
        self.learn_and_reply(env, &log, true);
        let others = env.others(self.id);
        env.send(self.id, &others, Msg::Commit { round, upto });
        self.drain_pending(env);
    }

    pub fn on_commit(&mut self, env: &mut Env, round: RoundId, upto: Slot) {
        if round != self.bev || self.floor != round {
            return;
        }
        self.last_heard = env.now();
        let log: Vec<(Slot, Payload)> = self.log().into_iter().filter(|(s, _)| *s <= upto).collect();
        self.learn_and_reply(env, &log, false);
    }

    pub fn heartbeat(&mut self, env: &mut Env) {
        let stalled = env.dissemination == Dissemination::CollectThenNotify && self.stalled(env);
        let others = env.others(self.id);
        env.send(
            self.id,
            &others,
            Msg::Heartbeat {
                round: self.bev,
                stalled,
            },
        );
    }

    pub fn on_heartbeat(&mut self, env: &mut Env, round: RoundId, stalled: bool) {
        if round >= self.bev && !stalled {
            self.last_heard = env.now();
        }
    }

    /// Whether a follower has heard nothing useful for longer than the
    /// progress timeout plus `extra`.
    pub fn quiet(&self, env: &Env, extra: u64) -> bool {
        env.now() > self.last_heard + env.timers.progress + extra
    }

    /// Drop a recovery that has made no progress for too long.
    pub fn expire_recovery(&mut self, env: &mut Env) {
        if let Some((started, _)) = &self.recovery {
            if env.now() > started + 3 * env.timers.progress {
                self.recovery = None;
                self.last_heard = env.now();
                env.note(self.id, "abandon", json!({"round": self.bev}));
            }
        }
    }

    pub fn rearm(&self, env: &mut Env) {
        env.timer(self.id, env.timers.heartbeat, Timer::Tick);
    }
}
