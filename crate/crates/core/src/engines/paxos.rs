use std::collections::BTreeMap;

use serde_json::json;

use crate::kernel::ProcessId;
use crate::multiconsensus::{recovery_log, McMode, Progress, RoundId};

use super::certifier::{CertNode, Recovery};
use super::env::Env;
use super::{BackoffPolicy, Dissemination, Msg};

impl CertNode {
    pub fn paxos_msg(&mut self, env: &mut Env, from: ProcessId, msg: Msg) {
        match msg {
            Msg::Request { cmd } => self.on_request(env, cmd),
            Msg::CertSeq { round, slot, payload } => {
                if round < self.bev {
                    let msg = Msg::CertSeq { round, slot, payload };
                    return self.ignore(env, from, &msg, "stale round");
                }
                if round > self.bev {
                    self.support(env, round, env.certifiers[round.id as usize]);
                    self.recovery = None;
                }
                self.last_heard = env.now();
                let pi = Progress::of(round, payload.clone());
                let cur = self.progress(slot);
                if cur != pi {
                    if !pi.succeeds(&cur) {
                        let msg = Msg::CertSeq { round, slot, payload };
                        return self.ignore(env, from, &msg, "not a successor");
                    }
                    self.certify(env, slot, round, &payload);
                }
                let to = match env.dissemination {
                    Dissemination::CollectThenNotify => vec![from],
                    Dissemination::BroadcastLearn => env.replicas.clone(),
                };
                env.send(self.id, &to, Msg::Cert { round, slot, payload });
            }
            Msg::Cert { round, slot, payload } => {
                if let Some(r) = self.paxos_replica.as_mut() {
                    if env.dissemination == Dissemination::BroadcastLearn {
                        r.on_msg(env, from, Msg::Cert { round, slot, payload });
                        return;
                    }
                }
                if self.count_cert(env, from, round, slot, &payload) {
                    let replicas = env.replicas.clone();
                    env.send(self.id, &replicas, Msg::Decide { slot, payload });
                }
            }
            Msg::Decide { .. } => match self.paxos_replica.as_mut() {
                Some(r) => r.on_msg(env, from, msg),
                None => self.ignore(env, from, &msg, "not a replica"),
            },
            Msg::Heartbeat { round, stalled } => self.on_heartbeat(env, round, stalled),
            Msg::Support { round } => {
                if round <= self.bev {
                    return self.ignore(env, from, &msg, "stale round");
                }
                self.support(env, round, from);
                self.recovery = None;
                let snap = self.snaps[&round].clone();
                env.send(self.id, &[from], Msg::Snapshot { snap });
            }
            Msg::Snapshot { snap } => {
                let Some((_, Recovery::Snapshots { round, snaps })) = self.recovery.as_mut() else {
                    return;
                };
                if snap.round != *round || *round != self.bev {
                    return;
                }
                snaps.insert(snap.certifier, snap);
                if env.is_majority(snaps.len()) {
                    self.paxos_finish_recovery(env);
                }
            }
            other => self.ignore(env, from, &other, "unexpected"),
        }
    }

    pub fn paxos_tick(&mut self, env: &mut Env) {
        self.expire_recovery(env);
        if self.is_seq && self.ready {
            self.heartbeat(env);
            return;
        }
        if self.recovery.is_none() && self.quiet(env, self.backoff) {
            self.paxos_start_recovery(env);
        }
    }

    fn paxos_start_recovery(&mut self, env: &mut Env) {
        let round = RoundId::new(self.bev.counter + 1, self.idx);
        self.support(env, round, self.id);
        let mut snaps = BTreeMap::new();
        snaps.insert(self.id, self.snaps[&round].clone());
        self.recovery = Some((env.now(), Recovery::Snapshots { round, snaps }));
        self.backoff = match env.timers.backoff {
            BackoffPolicy::None => 0,
            BackoffPolicy::ByIndex => self.idx as u64 * env.timers.progress / 2,
            BackoffPolicy::Random => {
                use rand::Rng;
                env.k.rng().gen_range(0..=env.timers.progress)
            }
        };
        let others = env.others(self.id);
        env.send(self.id, &others, Msg::Support { round });
    }

    fn paxos_finish_recovery(&mut self, env: &mut Env) {
        let Some((_, Recovery::Snapshots { snaps, .. })) = self.recovery.take() else {
            return;
        };
        let refs: Vec<_> = snaps.values().collect();
        let log = match recovery_log(McMode::Plain, &refs) {
            Ok(log) => log,
            Err(e) => {
                env.violations.push(format!("{} cannot recover: {e}", self.id));
                return;
            }
        };
        let from = snaps.keys().copied().collect();
        self.recover(env, self.id, from, log.clone());
        self.ready = true;
        env.note(self.id, "resume", json!({"round": self.bev, "slots": log.len()}));
        let now = env.now();
        for (slot, payload) in log {
            self.inflight.insert(
                slot,
                super::certifier::Inflight {
                    payload: payload.clone(),
                    since: now,
                    certs: [self.id].into(),
                },
            );
            self.paxos_disseminate(env, slot, payload);
        }
        self.drain_pending(env);
    }
}
