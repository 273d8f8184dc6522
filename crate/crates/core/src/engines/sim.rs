use std::collections::BTreeMap;

use rand::Rng;

use crate::kernel::{Fired, Kernel, ProcessId, ProcessKind, TraceEvent, VirtualTime};
use crate::multiconsensus::{McMode, McState};
use crate::specs::Style;

use super::certifier::CertNode;
use super::client::ClientNode;
use super::env::Env;
use super::replica::{ReplicaCore, ReplicaNode};
use super::zab::Omega;
use super::{BackoffPolicy, ConfigError, Msg, Protocol, Scenario, Timer};

/// Outcome of one simulation run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub trace: Vec<TraceEvent>,
    /// Online monitor rejections and end-of-run invariant failures.
    pub violations: Vec<String>,
    pub completed: usize,
    pub expected: usize,
    pub end_time: u64,
}

impl RunResult {
    pub fn all_completed(&self) -> bool {
        self.completed == self.expected
    }
}

struct Sim {
    env: Env,
    certs: BTreeMap<ProcessId, CertNode>,
    replicas: BTreeMap<ProcessId, ReplicaNode>,
    clients: BTreeMap<ProcessId, ClientNode>,
    omega: Omega,
}

/// Run a scenario to completion (all client operations answered, plus a
/// drain period) or until `max_ticks`.
pub fn run(sc: &Scenario) -> Result<RunResult, ConfigError> {
    sc.validate()?;
    let mut sim = Sim::new(sc)?;
    let mut drain_until: Option<u64> = None;
    while let Some(fired) = sim.env.k.step() {
        let now = sim.env.now();
        if now > sc.max_ticks {
            break;
        }
        sim.dispatch(fired);
        if drain_until.is_none() && sim.clients.values().all(ClientNode::done) {
            drain_until = Some(now + sc.drain);
        }
        if drain_until.is_some_and(|t| now >= t) {
            break;
        }
    }
    Ok(sim.finish(sc))
}

impl Sim {
    fn new(sc: &Scenario) -> Result<Self, ConfigError> {
        let timers = sc.resolved_timers();
        let certifiers = sc.certifiers();
        let replicas = sc.replica_ids();
        let initial = sc.app.initial_state();
        let seq = ProcessId::certifier(sc.initial_sequencer);
        let (mode, style) = if sc.protocol.is_passive() {
            (McMode::PrefixOrdered, Style::Passive)
        } else {
            (McMode::Plain, Style::Active)
        };
        let monitor = McState::new(mode, style, initial.clone(), &certifiers, &replicas, Some(seq));
        let mut k: Kernel<Msg, Timer> = Kernel::new(sc.kernel_config());
        for c in &sc.crashes {
            k.schedule_crash(c.process, VirtualTime(c.at))
                .map_err(|e| ConfigError::Invalid {
                    field: "crashes",
                    reason: e.to_string(),
                })?;
        }
        let mut env = Env::new(
            k,
            Some(monitor),
            timers,
            sc.protocol,
            sc.dissemination,
            certifiers.clone(),
            replicas.clone(),
            &sc.crash_triggers,
        );
        let dm = sc.initial_dm();
        let mut certs = BTreeMap::new();
        for &c in &certifiers {
            let mut node = CertNode::new(c, initial.clone(), c == seq);
            if sc.protocol.is_passive() {
                node.replica = Some(ReplicaCore::new(c, initial.clone()));
            } else if sc.colocated() {
                node.paxos_replica = Some(ReplicaNode::new(c, initial.clone()));
            }
            if sc.protocol == Protocol::Vsr {
                node.dm = dm.clone();
            }
            node.backoff = match timers.backoff {
                BackoffPolicy::None => 0,
                BackoffPolicy::ByIndex => c.index as u64 * timers.progress / 2,
                BackoffPolicy::Random => env.k.rng().gen_range(0..=timers.progress),
            };
            env.timer(c, timers.heartbeat, Timer::Tick);
            certs.insert(c, node);
        }
        let mut separate = BTreeMap::new();
        if !sc.colocated() {
            for &r in &replicas {
                separate.insert(r, ReplicaNode::new(r, initial.clone()));
            }
        }
        let mut clients = BTreeMap::new();
        for (c, ops) in sc.clients().into_iter().zip(sc.workload_ops()) {
            clients.insert(c, ClientNode::new(c, ops, seq));
            env.timer(c, 1, Timer::Start);
        }
        Ok(Self {
            env,
            certs,
            replicas: separate,
            clients,
            omega: Omega::default(),
        })
    }

    fn dispatch(&mut self, fired: Fired<Msg, Timer>) {
        let env = &mut self.env;
        match fired {
            Fired::Crash { .. } => {}
            Fired::Timer { process, payload } => match process.kind {
                ProcessKind::Client => {
                    if let Some(c) = self.clients.get_mut(&process) {
                        c.on_timer(env, payload);
                    }
                }
                ProcessKind::Certifier => {
                    if let Some(node) = self.certs.get_mut(&process) {
                        match env.protocol {
                            Protocol::Paxos => node.paxos_tick(env),
                            Protocol::Zab => node.zab_tick(env),
                            Protocol::Vsr => node.vsr_tick(env),
                        }
                        node.rearm(env);
                    }
                }
                _ => {}
            },
            Fired::Deliver { to, from, msg, .. } => match to.kind {
                ProcessKind::Client => {
                    if let (Some(c), Msg::Reply { op, result, leader }) = (self.clients.get_mut(&to), msg) {
                        c.on_reply(env, from, op, result, leader);
                    }
                }
                ProcessKind::Replica => {
                    if let Some(r) = self.replicas.get_mut(&to) {
                        r.on_msg(env, from, msg);
                    }
                }
                ProcessKind::Certifier => {
                    if let Some(node) = self.certs.get_mut(&to) {
                        match env.protocol {
                            Protocol::Paxos => node.paxos_msg(env, from, msg),
                            Protocol::Zab => node.zab_msg(env, from, msg),
                            Protocol::Vsr => node.vsr_msg(env, from, msg),
                        }
                    }
                }
                ProcessKind::Oracle => {
                    if matches!(msg, Msg::Suspect { .. }) {
                        self.omega.on_suspect(env);
                    }
                }
            },
        }
    }

    fn finish(self, sc: &Scenario) -> RunResult {
        let Sim { env, clients, .. } = self;
        let mut violations = env.violations;
        if let Some(m) = &env.monitor {
            for v in m.check_invariants() {
                if !violations.contains(&v) {
                    violations.push(v);
                }
            }
        }
        let end_time = env.k.now().0;
        RunResult {
            trace: env.k.into_trace(),
            violations,
            completed: clients.values().map(|c| c.completed).sum(),
            expected: sc.workload_ops().iter().map(Vec::len).sum(),
            end_time,
        }
    }
}
