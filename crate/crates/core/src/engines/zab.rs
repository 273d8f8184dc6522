use std::collections::{BTreeMap, BTreeSet};

use serde_json::json;

use crate::kernel::{ProcessId, VirtualTime};
use crate::multiconsensus::RoundId;
use crate::specs::{Payload, Slot};

use super::certifier::{CertNode, Recovery};
use super::env::Env;
use super::{Msg, RoundStamp};

impl CertNode {
    pub fn zab_msg(&mut self, env: &mut Env, from: ProcessId, msg: Msg) {
        match msg {
            Msg::Request { cmd } => self.on_request(env, cmd),
            Msg::CertSeq { round, slot, payload } => self.po_certseq(env, from, round, slot, payload),
            Msg::Cert { round, slot, payload } => {
                if self.count_cert(env, from, round, slot, &payload) {
                    self.passive_decided(env, slot, payload);
                }
            }
            Msg::Decide { slot, payload } => self.learn_and_reply(env, &[(slot, payload)], false),
            Msg::Heartbeat { round, stalled } => self.on_heartbeat(env, round, stalled),
            Msg::Nominate => {
                if self.recovery.is_some() || (self.is_seq && self.ready) {
                    return self.ignore(env, from, &msg, "busy");
                }
                let seen = BTreeMap::from([(self.id, self.bev)]);
                self.recovery = Some((env.now(), Recovery::Epochs { seen }));
                let others = env.others(self.id);
                env.send(self.id, &others, Msg::EpochQuery);
            }
            Msg::EpochQuery => env.send(self.id, &[from], Msg::Epoch { round: self.bev }),
            Msg::Epoch { round } => {
                let Some((_, Recovery::Epochs { seen })) = self.recovery.as_mut() else {
                    return;
                };
                seen.insert(from, round);
                if !env.is_majority(seen.len()) {
                    return;
                }
                let top = seen.values().map(|r| r.counter).max().unwrap_or(0);
                let round = RoundId::epoch(top.max(self.bev.counter) + 1);
                self.support(env, round, self.id);
                let stamps = BTreeMap::from([(self.id, self.stamp())]);
                self.recovery = Some((env.now(), Recovery::Stamps { round, stamps }));
                let others = env.others(self.id);
                env.send(self.id, &others, Msg::Support { round });
            }
            Msg::Support { round } => {
                if round <= self.bev {
                    return self.ignore(env, from, &msg, "stale round");
                }
                self.support(env, round, from);
                self.recovery = None;
                let stamp = self.stamp();
                env.send(self.id, &[from], Msg::Stamp { round, stamp });
            }
            Msg::Stamp { round, stamp } => {
                let Some((_, Recovery::Stamps { round: r, stamps })) = self.recovery.as_mut() else {
                    return;
                };
                if *r != round || round != self.bev {
                    return;
                }
                stamps.insert(from, stamp);
                if env.is_majority(stamps.len()) {
                    let stamps = stamps.clone();
                    self.zab_gather(env, round, stamps);
                }
            }
            Msg::Fetch { round, have } => self.zab_sync(env, from, round, have),
            Msg::Sync {
                round,
                full,
                from_slot,
                entries,
            } => {
                let Some((_, Recovery::Fetching { round: r, from: quorum, source, want })) = self.recovery.clone() else {
                    return;
                };
                if r != round || source != from || round != self.bev {
                    return;
                }
                let mut log: Vec<Payload> = if full {
                    Vec::new()
                } else {
                    self.log().into_values().take(from_slot as usize - 1).collect()
                };
                let count = entries.len();
                log.extend(entries);
                env.note(
                    self.id,
                    "fetch",
                    json!({"source": source, "kind": if full { "full" } else { "diff" }, "slots": count}),
                );
                if log.len() as u64 != want.1 {
                    env.violations
                        .push(format!("{} fetched {} slots, expected {}", self.id, log.len(), want.1));
                }
                self.zab_become_leader(env, quorum, numbered(log));
            }
            Msg::NewView { round, log, dm } => self.on_new_view(env, from, round, log, dm),
            Msg::Ack { round } => self.on_ack(env, from, round),
            Msg::Commit { round, upto } => self.on_commit(env, round, upto),
            other => self.ignore(env, from, &other, "unexpected"),
        }
    }

    /// Nominee with a majority of round-stamps: use its own log if it is
    /// the most recent, otherwise fetch the missing part.
    fn zab_gather(&mut self, env: &mut Env, round: RoundId, stamps: BTreeMap<ProcessId, RoundStamp>) {
        let quorum: BTreeSet<ProcessId> = stamps.keys().copied().collect();
        let best = *stamps.values().max().expect("non-empty");
        let own = stamps[&self.id];
        if own == best {
            return self.zab_become_leader(env, quorum, self.log());
        }
        let source = stamps
            .iter()
            .find(|(_, s)| **s == best)
            .map(|(p, _)| *p)
            .expect("best is present");
        self.recovery = Some((
            env.now(),
            Recovery::Fetching {
                round,
                from: quorum,
                source,
                want: best,
            },
        ));
        env.send(self.id, &[source], Msg::Fetch { round, have: own });
    }

    fn zab_become_leader(&mut self, env: &mut Env, from: BTreeSet<ProcessId>, log: BTreeMap<Slot, Payload>) {
        self.recover(env, self.id, from, log);
        self.install_as_sequencer(env);
    }

    /// Answer a fetch from the snapshot taken for that round: only the
    /// missing suffix when the requester is close behind in the same round,
    /// the whole log otherwise.
    fn zab_sync(&mut self, env: &mut Env, from: ProcessId, round: RoundId, have: RoundStamp) {
        let Some(snap) = self.snaps.get(&round) else {
            return self.ignore(env, from, &Msg::Fetch { round, have }, "no snapshot");
        };
        let all: Vec<Payload> = snap.entries.values().filter_map(|p| p.payload.clone()).collect();
        let len = all.len() as u64;
        let diff = snap.floor == have.0 && have.1 <= len && len - have.1 <= env.timers.sync_gap_limit;
        let (from_slot, entries) = if diff {
            (have.1 + 1, all[have.1 as usize..].to_vec())
        } else {
            (1, all)
        };
        env.send(
            self.id,
            &[from],
            Msg::Sync {
                round,
                full: !diff,
                from_slot,
                entries,
            },
        );
    }

    pub fn zab_tick(&mut self, env: &mut Env) {
        self.expire_recovery(env);
        if self.is_seq && self.ready {
            self.heartbeat(env);
            return;
        }
        if self.recovery.is_some() || !self.quiet(env, 0) {
            return;
        }
        if self.last_suspect.is_some_and(|t| env.now() < t + env.timers.progress) {
            return;
        }
        self.last_suspect = Some(env.now());
        env.send(self.id, &[ProcessId::oracle(0)], Msg::Suspect { round: self.bev });
    }
}

fn numbered(log: Vec<Payload>) -> BTreeMap<Slot, Payload> {
    (1..).zip(log).collect()
}

/// Ω: nominates the lowest certifier not known to have crashed, where a
/// crash becomes known after the detection lag.
#[derive(Default)]
pub(crate) struct Omega {
    last: Option<u64>,
}

impl Omega {
    pub fn on_suspect(&mut self, env: &mut Env) {
        let now = env.now();
        if self.last.is_some_and(|t| now < t + env.timers.progress) {
            return;
        }
        let lag = env.timers.detection_lag;
        let known_dead = |at: Option<VirtualTime>| at.is_some_and(|t| t.0 + lag <= now);
        let Some(nominee) = env
            .certifiers
            .iter()
            .copied()
            .find(|&c| !known_dead(env.k.crashed_at(c)))
        else {
            return;
        };
        self.last = Some(now);
        env.send(ProcessId::oracle(0), &[nominee], Msg::Nominate);
    }
}
