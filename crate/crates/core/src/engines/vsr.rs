use std::collections::{BTreeMap, BTreeSet};

use serde_json::json;

use crate::kernel::ProcessId;
use crate::multiconsensus::RoundId;

use super::certifier::{CertNode, Recovery};
use super::env::Env;
use super::Msg;

impl CertNode {
    pub fn vsr_msg(&mut self, env: &mut Env, from: ProcessId, msg: Msg) {
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
            Msg::Suspect { round } => {
                if round <= self.bev || env.certifiers[round.id as usize] != self.id {
                    return self.ignore(env, from, &msg, "not managing");
                }
                if matches!(self.recovery, Some((_, Recovery::Stamps { round: r, .. })) if r >= round) {
                    return;
                }
                self.vsr_start_view_change(env, round);
            }
            Msg::Support { round } => {
                if round <= self.bev {
                    return self.ignore(env, from, &msg, "stale round");
                }
                self.support(env, round, from);
                self.recovery = None;
                self.target = self.target.max(round);
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
                if !env.is_majority(stamps.len()) {
                    return;
                }
                let stamps = stamps.clone();
                self.recovery = None;
                let dm: BTreeSet<ProcessId> = stamps.keys().copied().collect();
                let best = *stamps.values().max().expect("non-empty");
                let primary = if stamps[&self.id] == best {
                    self.id
                } else {
                    stamps.iter().find(|(_, s)| **s == best).map(|(p, _)| *p).expect("present")
                };
                env.note(self.id, "appoint", json!({"round": round, "primary": primary, "dm": dm}));
                if primary == self.id {
                    self.vsr_become_primary(env, self.id, dm);
                } else {
                    env.send(self.id, &[primary], Msg::Appoint { round, dm });
                }
            }
            Msg::Appoint { round, dm } => {
                if round != self.bev || self.is_seq || self.floor >= round {
                    let msg = Msg::Appoint { round, dm };
                    return self.ignore(env, from, &msg, "stale round");
                }
                self.vsr_become_primary(env, from, dm);
            }
            Msg::NewView { round, log, dm } => self.on_new_view(env, from, round, log, dm),
            Msg::Ack { round } => self.on_ack(env, from, round),
            Msg::Commit { round, upto } => self.on_commit(env, round, upto),
            other => self.ignore(env, from, &other, "unexpected"),
        }
    }

    fn vsr_start_view_change(&mut self, env: &mut Env, round: RoundId) {
        self.support(env, round, self.id);
        self.target = self.target.max(round);
        let stamps = BTreeMap::from([(self.id, self.stamp())]);
        self.recovery = Some((env.now(), Recovery::Stamps { round, stamps }));
        let others = env.others(self.id);
        env.send(self.id, &others, Msg::Support { round });
    }

    /// The certifier with the highest round-stamp takes over with its own
    /// log; the responders of the view change form the new designated
    /// majority.
    fn vsr_become_primary(&mut self, env: &mut Env, coord: ProcessId, dm: BTreeSet<ProcessId>) {
        let log = self.log();
        self.recover(env, coord, dm.clone(), log);
        self.dm = dm;
        self.install_as_sequencer(env);
    }

    pub fn vsr_tick(&mut self, env: &mut Env) {
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
        let n = env.certifiers.len() as u32;
        let counter = self.bev.max(self.target).counter + 1;
        let round = RoundId::new(counter, counter % n);
        self.target = round;
        let manager = env.certifiers[round.id as usize];
        if manager == self.id {
            self.vsr_start_view_change(env, round);
        } else {
            env.send(self.id, &[manager], Msg::Suspect { round });
        }
    }
}
