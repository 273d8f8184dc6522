use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::app::{AppConfig, OpKind, Operation};
use crate::kernel::{DelayBounds, KernelConfig, ProcessId, ProcessKind, SchedulePolicy};
use crate::specs::Slot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Paxos,
    Vsr,
    Zab,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Paxos, Protocol::Vsr, Protocol::Zab];

    /// VSR and Zab order state updates under prefix order.
    pub fn is_passive(self) -> bool {
        !matches!(self, Protocol::Paxos)
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::Paxos => "paxos",
            Protocol::Vsr => "vsr",
            Protocol::Zab => "zab",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dissemination {
    /// Certifiers answer the sequencer, which notifies the replicas.
    #[default]
    CollectThenNotify,
    /// Certifiers notify every replica directly.
    BroadcastLearn,
}

impl std::fmt::Display for Dissemination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Dissemination::CollectThenNotify => "collect_then_notify",
            Dissemination::BroadcastLearn => "broadcast_learn",
        })
    }
}

/// How long a Paxos follower waits beyond the progress timeout before it
/// tries to take over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackoffPolicy {
    None,
    /// Half a progress timeout per certifier index.
    #[default]
    ByIndex,
    /// Uniform in [0, progress timeout].
    Random,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimerSpec {
    pub progress: Option<u64>,
    pub heartbeat: Option<u64>,
    pub client_retry: Option<u64>,
    pub detection_lag: Option<u64>,
    #[serde(default)]
    pub backoff: BackoffPolicy,
    pub sync_gap_limit: Option<u64>,
}

/// Timer values in ticks, with defaults filled in from the network delay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timers {
    pub progress: u64,
    pub heartbeat: u64,
    pub client_retry: u64,
    pub detection_lag: u64,
    pub backoff: BackoffPolicy,
    pub sync_gap_limit: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    #[serde(default = "one")]
    pub delay_min: u64,
    #[serde(default = "one")]
    pub delay_max: u64,
    #[serde(default)]
    pub loss: f64,
    #[serde(default = "retransmit_default")]
    pub retransmit_after: Option<u64>,
    #[serde(default)]
    pub policy: SchedulePolicy,
    #[serde(default = "max_defer_default")]
    pub max_defer: u32,
    #[serde(default)]
    pub slow: BTreeMap<ProcessId, u64>,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            delay_min: 1,
            delay_max: 1,
            loss: 0.0,
            retransmit_after: retransmit_default(),
            policy: SchedulePolicy::Ordered,
            max_defer: max_defer_default(),
            slow: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpMix {
    Inc,
    Double,
    Set,
    Read,
    Put,
    Get,
    Noop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    #[serde(default = "one_usize")]
    pub clients: usize,
    #[serde(default = "ops_default")]
    pub ops_per_client: usize,
    /// Operation kinds drawn uniformly; defaults depend on the application.
    #[serde(default)]
    pub mix: Vec<OpMix>,
    /// Explicit operations per client; overrides the generator.
    #[serde(default)]
    pub script: Option<Vec<Vec<OpKind>>>,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            clients: 1,
            ops_per_client: ops_default(),
            mix: Vec::new(),
            script: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrashAt {
    pub process: ProcessId,
    pub at: u64,
}

/// Crash `process` in the tick in which the `nth` matching transition is
/// traced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrashTrigger {
    pub process: ProcessId,
    pub on: String,
    #[serde(default)]
    pub by: Option<ProcessId>,
    #[serde(default)]
    pub slot: Option<Slot>,
    #[serde(default = "one_usize")]
    pub nth: usize,
}

pub type AppSpec = AppConfig;

/// A complete, self-describing simulation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub protocol: Protocol,
    #[serde(default = "three")]
    pub n: usize,
    #[serde(default = "one_usize")]
    pub f: usize,
    /// Replica count for Paxos with separate replicas.
    #[serde(default = "two")]
    pub replicas: usize,
    /// Replicas live on the certifiers. Always true for VSR and Zab.
    #[serde(default)]
    pub colocated: Option<bool>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dissemination: Dissemination,
    /// VSR round-0 designated majority, by certifier index.
    #[serde(default)]
    pub designated_majority: Option<Vec<u32>>,
    #[serde(default)]
    pub initial_sequencer: u32,
    #[serde(default = "max_ticks_default")]
    pub max_ticks: u64,
    #[serde(default = "drain_default")]
    pub drain: u64,
    #[serde(default = "yes")]
    pub respect_threshold: bool,
    #[serde(default)]
    pub app: AppConfig,
    #[serde(default)]
    pub workload: WorkloadSpec,
    #[serde(default)]
    pub network: NetworkSpec,
    #[serde(default)]
    pub timers: TimerSpec,
    #[serde(default)]
    pub crashes: Vec<CrashAt>,
    #[serde(default)]
    pub crash_triggers: Vec<CrashTrigger>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid<T>(field: &'static str, reason: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid {
        field,
        reason: reason.into(),
    })
}

impl Scenario {
    pub fn new(protocol: Protocol) -> Self {
        Self {
            protocol,
            n: 3,
            f: 1,
            replicas: 2,
            colocated: None,
            seed: 0,
            dissemination: Dissemination::default(),
            designated_majority: None,
            initial_sequencer: 0,
            max_ticks: max_ticks_default(),
            drain: drain_default(),
            respect_threshold: true,
            app: AppConfig::default(),
            workload: WorkloadSpec::default(),
            network: NetworkSpec::default(),
            timers: TimerSpec::default(),
            crashes: Vec::new(),
            crash_triggers: Vec::new(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n < 2 * self.f + 1 {
            return invalid("n", format!("n = {} but n >= 2f+1 = {} is required", self.n, 2 * self.f + 1));
        }
        if self.initial_sequencer as usize >= self.n {
            return invalid("initial_sequencer", "not a certifier index");
        }
        if self.protocol.is_passive() && self.colocated == Some(false) {
            return invalid("colocated", format!("{} replicas are always co-located", self.protocol));
        }
        if !self.colocated() && self.replicas == 0 {
            return invalid("replicas", "at least one replica is required");
        }
        if self.dissemination == Dissemination::BroadcastLearn && self.protocol != Protocol::Paxos {
            return invalid("dissemination", "broadcast_learn is only supported for paxos");
        }
        if let Some(dm) = &self.designated_majority {
            if self.protocol != Protocol::Vsr {
                return invalid("designated_majority", "only meaningful for vsr");
            }
            let set: BTreeSet<u32> = dm.iter().copied().collect();
            if set.len() != dm.len() || set.iter().any(|&i| i as usize >= self.n) {
                return invalid("designated_majority", "members must be distinct certifier indices");
            }
            if 2 * set.len() <= self.n {
                return invalid("designated_majority", "must be a majority of certifiers");
            }
            if !set.contains(&self.initial_sequencer) {
                return invalid("designated_majority", "must contain the initial sequencer");
            }
        }
        if self.network.delay_min > self.network.delay_max {
            return invalid("network.delay_min", "exceeds delay_max");
        }
        if !(0.0..1.0).contains(&self.network.loss) {
            return invalid("network.loss", "must be in [0, 1)");
        }
        if self.network.loss > 0.0 && self.network.retransmit_after.is_none() {
            return invalid("network.retransmit_after", "required when loss > 0");
        }
        if self.workload.clients == 0 {
            return invalid("workload.clients", "at least one client is required");
        }
        if let Some(script) = &self.workload.script {
            if script.len() != self.workload.clients {
                return invalid("workload.script", "needs one operation list per client");
            }
        }
        let mut crashed = BTreeSet::new();
        for c in &self.crashes {
            self.check_process("crashes", c.process)?;
            if c.process.kind == ProcessKind::Certifier {
                crashed.insert(c.process);
            }
        }
        for t in &self.crash_triggers {
            self.check_process("crash_triggers", t.process)?;
            if t.process.kind == ProcessKind::Certifier {
                crashed.insert(t.process);
            }
        }
        if self.respect_threshold && crashed.len() > self.f {
            return invalid("crashes", format!("{} certifier crashes exceed f = {}", crashed.len(), self.f));
        }
        Ok(())
    }

    fn check_process(&self, field: &'static str, p: ProcessId) -> Result<(), ConfigError> {
        let ok = match p.kind {
            ProcessKind::Certifier => (p.index as usize) < self.n,
            ProcessKind::Replica => !self.colocated() && (p.index as usize) < self.replicas,
            ProcessKind::Client => (p.index as usize) < self.workload.clients,
            ProcessKind::Oracle => self.protocol == Protocol::Zab && p.index == 0,
        };
        if ok {
            Ok(())
        } else {
            invalid(field, format!("{p} is not a process of this scenario"))
        }
    }

    pub fn colocated(&self) -> bool {
        self.protocol.is_passive() || self.colocated.unwrap_or(false)
    }

    pub fn certifiers(&self) -> Vec<ProcessId> {
        (0..self.n as u32).map(ProcessId::certifier).collect()
    }

    pub fn replica_ids(&self) -> Vec<ProcessId> {
        if self.colocated() {
            self.certifiers()
        } else {
            (0..self.replicas as u32).map(ProcessId::replica).collect()
        }
    }

    pub fn clients(&self) -> Vec<ProcessId> {
        (0..self.workload.clients as u32).map(ProcessId::client).collect()
    }

    /// The VSR designated majority of round 0.
    pub fn initial_dm(&self) -> BTreeSet<ProcessId> {
        match &self.designated_majority {
            Some(dm) => dm.iter().map(|&i| ProcessId::certifier(i)).collect(),
            None => (0..=self.f as u32)
                .map(|i| ProcessId::certifier((self.initial_sequencer + i) % self.n as u32))
                .collect(),
        }
    }

    pub fn kernel_config(&self) -> KernelConfig {
        KernelConfig {
            seed: self.seed,
            delay: DelayBounds {
                min: self.network.delay_min,
                max: self.network.delay_max,
            },
            loss: self.network.loss,
            retransmit_after: self.network.retransmit_after,
            slow: self.network.slow.clone(),
            policy: self.network.policy,
            max_defer: self.network.max_defer,
            f: self.f,
            respect_threshold: self.respect_threshold,
        }
    }

    pub fn resolved_timers(&self) -> Timers {
        let mean = (self.network.delay_min + self.network.delay_max) as f64 / 2.0;
        let progress = self.timers.progress.unwrap_or((10.0 * mean).ceil().max(2.0) as u64);
        Timers {
            progress,
            heartbeat: self.timers.heartbeat.unwrap_or((progress / 3).max(1)),
            client_retry: self.timers.client_retry.unwrap_or(3 * progress),
            detection_lag: self.timers.detection_lag.unwrap_or((progress / 2).max(1)),
            backoff: self.timers.backoff,
            sync_gap_limit: self.timers.sync_gap_limit.unwrap_or(16),
        }
    }

    /// Operations per client, generated from a stream seeded separately
    /// from the network.
    pub fn workload_ops(&self) -> Vec<Vec<Operation>> {
        let mut next_id = 0u64;
        let mut id = || {
            next_id += 1;
            next_id
        };
        if let Some(script) = &self.workload.script {
            return script
                .iter()
                .map(|ops| ops.iter().map(|k| Operation::new(id(), k.clone())).collect())
                .collect();
        }
        let mix = if self.workload.mix.is_empty() {
            match self.app {
                AppConfig::Register { .. } => vec![OpMix::Inc, OpMix::Double, OpMix::Read],
                AppConfig::Kv => vec![OpMix::Put, OpMix::Get],
            }
        } else {
            self.workload.mix.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5_eed0_f0b5);
        (0..self.workload.clients)
            .map(|_| {
                (0..self.workload.ops_per_client)
                    .map(|_| {
                        let kind = match mix[rng.gen_range(0..mix.len())] {
                            OpMix::Inc => OpKind::Inc,
                            OpMix::Double => OpKind::Double,
                            OpMix::Set => OpKind::Set {
                                value: rng.gen_range(0..100),
                            },
                            OpMix::Read => OpKind::Read,
                            OpMix::Put => OpKind::Put {
                                key: format!("k{}", rng.gen_range(0..4)),
                                value: rng.gen_range(0..100),
                            },
                            OpMix::Get => OpKind::Get {
                                key: format!("k{}", rng.gen_range(0..4)),
                            },
                            OpMix::Noop => OpKind::Noop,
                        };
                        Operation::new(id(), kind)
                    })
                    .collect()
            })
            .collect()
    }
}

fn one() -> u64 {
    1
}

fn one_usize() -> usize {
    1
}

fn two() -> usize {
    2
}

fn three() -> usize {
    3
}

fn yes() -> bool {
    true
}

fn ops_default() -> usize {
    10
}

fn retransmit_default() -> Option<u64> {
    Some(4)
}

fn max_defer_default() -> u32 {
    8
}

fn max_ticks_default() -> u64 {
    100_000
}

fn drain_default() -> u64 {
    50
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_toml_gets_defaults() {
        let s = Scenario::from_toml("protocol = \"paxos\"\n").unwrap();
        assert_eq!(s.n, 3);
        assert_eq!(s.replica_ids().len(), 2);
        let t = s.resolved_timers();
        assert_eq!(t.progress, 10);
        assert_eq!(t.sync_gap_limit, 16);
    }

    #[test]
    fn threshold_and_unknown_keys_are_rejected() {
        let err = Scenario::from_toml("protocol = \"zab\"\nn = 4\nf = 2\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { field: "n", .. }));
        let err = Scenario::from_toml("protocol = \"zab\"\nbogus = 1\n").unwrap_err();
        assert!(matches!(err, ConfigError::Parse(_)));
        let err = Scenario::from_toml(
            "protocol = \"paxos\"\n[[crashes]]\nprocess = \"certifier:0\"\nat = 5\n[[crashes]]\nprocess = \"certifier:1\"\nat = 6\n",
        )
        .unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { field: "crashes", .. }));
    }

    #[test]
    fn workload_ids_are_unique_and_seeded() {
        let mut s = Scenario::new(Protocol::Paxos);
        s.workload.clients = 3;
        s.workload.ops_per_client = 5;
        let ops = s.workload_ops();
        let ids: BTreeSet<_> = ops.iter().flatten().map(|o| o.id).collect();
        assert_eq!(ids.len(), 15);
        assert_eq!(ops, s.workload_ops());
    }

    #[test]
    fn vsr_default_designated_majority() {
        let s = Scenario::new(Protocol::Vsr);
        assert_eq!(
            s.initial_dm(),
            BTreeSet::from([ProcessId::certifier(0), ProcessId::certifier(1)])
        );
        assert!(s.colocated());
    }
}
