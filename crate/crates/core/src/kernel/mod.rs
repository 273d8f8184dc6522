//! Deterministic discrete-event simulation kernel.
//!
//! The kernel owns virtual time, a seeded random source, the grow-only
//! message pool, pending timers and crash events, and the trace. Engines are
//! driven by [`Kernel::step`], which hands back one fired event at a time;
//! handlers record the transitions they execute with [`Kernel::record`].
//!
//! Randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with
//! `seed_from_u64`, so a seed and a configuration fully determine a run.

mod pool;
mod process;
mod trace;

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use pool::{DeliveryStatus, MessagePool, PoolEntry, PoolTag};
pub use process::{ParseProcessIdError, ProcessId, ProcessKind, VirtualTime};
pub use trace::{read_trace, trace_to_string, write_trace, TraceError, TraceEvent};

/// Inclusive bounds on a random delay, in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayBounds {
    pub min: u64,
    pub max: u64,
}

impl DelayBounds {
    pub const fn fixed(ticks: u64) -> Self {
        Self {
            min: ticks,
            max: ticks,
        }
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> u64 {
        if self.max <= self.min {
            self.min
        } else {
            rng.gen_range(self.min..=self.max)
        }
    }
}

/// How the kernel picks among events that are due at the current tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulePolicy {
    /// Lowest (time, seq) first.
    #[default]
    Ordered,
    /// Most recently scheduled due event first. Starves old events unless
    /// aging intervenes; used to exercise the fairness bound.
    Newest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub seed: u64,
    pub delay: DelayBounds,
    /// Per-delivery loss probability.
    pub loss: f64,
    /// Lost deliveries are retried after this many ticks; `None` drops them.
    pub retransmit_after: Option<u64>,
    /// Extra one-way delay for messages to or from a process.
    pub slow: BTreeMap<ProcessId, u64>,
    pub policy: SchedulePolicy,
    /// A due event passed over this many times is forced next.
    pub max_defer: u32,
    /// Failure threshold for certifiers.
    pub f: usize,
    pub respect_threshold: bool,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            delay: DelayBounds::fixed(1),
            loss: 0.0,
            retransmit_after: Some(4),
            slow: BTreeMap::new(),
            policy: SchedulePolicy::Ordered,
            max_defer: 8,
            f: 1,
            respect_threshold: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum KernelError {
    #[error("crash of {process} at {at} is earlier than current time {now}")]
    CrashInPast {
        process: ProcessId,
        at: VirtualTime,
        now: VirtualTime,
    },
    #[error("crashing {process} would exceed the failure threshold f = {f}")]
    ThresholdExceeded { process: ProcessId, f: usize },
    #[error("{0} has crashed")]
    Crashed(ProcessId),
}

#[derive(Debug, Clone)]
enum EventKind<T> {
    Deliver { entry: usize, to: ProcessId },
    Timer { process: ProcessId, payload: T },
    Crash { process: ProcessId },
}

impl<T> EventKind<T> {
    fn owner(&self) -> ProcessId {
        match self {
            EventKind::Deliver { to, .. } => *to,
            EventKind::Timer { process, .. } => *process,
            EventKind::Crash { process } => *process,
        }
    }
}

/// An event handed back by [`Kernel::step`].
#[derive(Debug, Clone)]
pub enum Fired<M, T> {
    Deliver {
        to: ProcessId,
        from: ProcessId,
        entry: usize,
        msg: M,
    },
    Timer {
        process: ProcessId,
        payload: T,
    },
    Crash {
        process: ProcessId,
    },
}

/// Handle for a scheduled event; used to cancel timers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventKey {
    time: VirtualTime,
    seq: u64,
}

impl EventKey {
    pub fn time(&self) -> VirtualTime {
        self.time
    }
}

#[derive(Debug)]
pub struct Kernel<M, T> {
    cfg: KernelConfig,
    now: VirtualTime,
    next_event_seq: u64,
    next_trace_seq: u64,
    pending: BTreeMap<EventKey, EventKind<T>>,
    deferred: HashMap<EventKey, u32>,
    pool: MessagePool<M>,
    crashed: BTreeMap<ProcessId, VirtualTime>,
    crash_plan: BTreeMap<ProcessId, VirtualTime>,
    rng: ChaCha8Rng,
    trace: Vec<TraceEvent>,
    notes: Vec<(VirtualTime, String)>,
    max_observed_defer: u32,
}

impl<M: Clone, T: Clone> Kernel<M, T> {
    pub fn new(cfg: KernelConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self {
            cfg,
            now: VirtualTime::ZERO,
            next_event_seq: 0,
            next_trace_seq: 1,
            pending: BTreeMap::new(),
            deferred: HashMap::new(),
            pool: MessagePool::default(),
            crashed: BTreeMap::new(),
            crash_plan: BTreeMap::new(),
            rng,
            trace: Vec::new(),
            notes: Vec::new(),
            max_observed_defer: 0,
        }
    }

    pub fn config(&self) -> &KernelConfig {
        &self.cfg
    }

    pub fn now(&self) -> VirtualTime {
        self.now
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn pool(&self) -> &MessagePool<M> {
        &self.pool
    }

    pub fn trace(&self) -> &[TraceEvent] {
        &self.trace
    }

    pub fn into_trace(self) -> Vec<TraceEvent> {
        self.trace
    }

    /// Diagnostics for discarded events; kept out of the trace so that no
    /// record is attributed to a crashed process.
    pub fn notes(&self) -> &[(VirtualTime, String)] {
        &self.notes
    }

    pub fn is_crashed(&self, p: ProcessId) -> bool {
        self.crashed.contains_key(&p)
    }

    pub fn crashed_at(&self, p: ProcessId) -> Option<VirtualTime> {
        self.crashed.get(&p).copied()
    }

    /// Largest number of times any due event was passed over.
    pub fn max_observed_defer(&self) -> u32 {
        self.max_observed_defer
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    fn insert(&mut self, at: VirtualTime, kind: EventKind<T>) -> EventKey {
        let key = EventKey {
            time: at,
            seq: self.next_event_seq,
        };
        self.next_event_seq += 1;
        self.pending.insert(key, kind);
        key
    }

    /// Schedule a timer for a live process with a delay drawn from `bounds`.
    pub fn schedule_timer(
        &mut self,
        process: ProcessId,
        bounds: DelayBounds,
        payload: T,
    ) -> Result<EventKey, KernelError> {
        if self.is_crashed(process) {
            self.notes
                .push((self.now, format!("timer for crashed {process} discarded")));
            return Err(KernelError::Crashed(process));
        }
        let delay = bounds.draw(&mut self.rng);
        Ok(self.insert(self.now.after(delay), EventKind::Timer { process, payload }))
    }

    pub fn cancel(&mut self, key: EventKey) -> bool {
        self.deferred.remove(&key);
        self.pending.remove(&key).is_some()
    }

    /// Plan a crash of `p` at `at`. Certifier crashes beyond `f` are refused
    /// when the threshold is respected.
    pub fn schedule_crash(&mut self, p: ProcessId, at: VirtualTime) -> Result<(), KernelError> {
        if at < self.now {
            return Err(KernelError::CrashInPast {
                process: p,
                at,
                now: self.now,
            });
        }
        if p.is_certifier() && self.cfg.respect_threshold && !self.crash_plan.contains_key(&p) {
            let planned = self.crash_plan.keys().filter(|q| q.is_certifier()).count();
            if planned + 1 > self.cfg.f {
                return Err(KernelError::ThresholdExceeded {
                    process: p,
                    f: self.cfg.f,
                });
            }
        }
        self.crash_plan.insert(p, at);
        self.insert(at, EventKind::Crash { process: p });
        Ok(())
    }

    /// Append a message to the pool and schedule one delivery per recipient.
    /// Returns the pool entry index, or `None` when the sender has crashed.
    pub fn send(
        &mut self,
        from: ProcessId,
        recipients: &[ProcessId],
        tag: PoolTag,
        label: &str,
        msg: M,
    ) -> Option<usize> {
        if self.is_crashed(from) {
            self.notes
                .push((self.now, format!("send {label} from crashed {from} discarded")));
            return None;
        }
        let entry = self.pool.push(tag, label, from, self.now, msg, recipients);
        for &to in recipients {
            let delay = self.link_delay(from, to);
            self.insert(self.now.after(delay), EventKind::Deliver { entry, to });
        }
        Some(entry)
    }

    fn link_delay(&mut self, from: ProcessId, to: ProcessId) -> u64 {
        let base = self.cfg.delay.draw(&mut self.rng);
        let extra = self.cfg.slow.get(&from).copied().unwrap_or(0)
            + if from != to {
                self.cfg.slow.get(&to).copied().unwrap_or(0)
            } else {
                0
            };
        base + extra
    }

    /// Record one executed transition. Panics if the process has crashed,
    /// which would be a driver bug.
    pub fn record(
        &mut self,
        process: ProcessId,
        transition: &str,
        params: serde_json::Value,
    ) -> u64 {
        assert!(
            !self.is_crashed(process) || self.crashed[&process] == self.now,
            "trace event for crashed process {process}"
        );
        let seq = self.next_trace_seq;
        self.next_trace_seq += 1;
        self.trace.push(TraceEvent {
            seq,
            time: self.now,
            process,
            transition: transition.to_string(),
            params,
        });
        seq
    }

    fn choose(&mut self) -> Option<EventKey> {
        let first = *self.pending.keys().next()?;
        if self.cfg.policy == SchedulePolicy::Ordered {
            return Some(first);
        }
        let due_limit = EventKey {
            time: first.time,
            seq: u64::MAX,
        };
        let due: Vec<EventKey> = self.pending.range(..=due_limit).map(|(k, _)| *k).collect();
        let forced = due
            .iter()
            .copied()
            .find(|k| self.deferred.get(k).copied().unwrap_or(0) >= self.cfg.max_defer);
        let chosen = forced.unwrap_or(*due.last().expect("non-empty"));
        for k in due {
            if k != chosen {
                let d = self.deferred.entry(k).or_insert(0);
                *d += 1;
                self.max_observed_defer = self.max_observed_defer.max(*d);
            }
        }
        self.deferred.remove(&chosen);
        Some(chosen)
    }

    /// Fire the next event. Returns `None` at quiescence.
    pub fn step(&mut self) -> Option<Fired<M, T>> {
        loop {
            let key = self.choose()?;
            let kind = self.pending.remove(&key).expect("chosen key is pending");
            if key.time > self.now {
                self.now = key.time;
            }
            match kind {
                EventKind::Crash { process } => {
                    if self.is_crashed(process) {
                        continue;
                    }
                    self.crashed.insert(process, self.now);
                    let doomed: Vec<EventKey> = self
                        .pending
                        .iter()
                        .filter(|(_, k)| k.owner() == process)
                        .map(|(key, _)| *key)
                        .collect();
                    for k in doomed {
                        if let Some(EventKind::Deliver { entry, to }) = self.pending.remove(&k) {
                            self.pool.set_status(entry, to, DeliveryStatus::Cancelled);
                        }
                        self.deferred.remove(&k);
                    }
                    self.record(process, "crash", serde_json::Value::Null);
                    return Some(Fired::Crash { process });
                }
                EventKind::Timer { process, payload } => {
                    if self.is_crashed(process) {
                        self.notes
                            .push((self.now, format!("timer of crashed {process} discarded")));
                        continue;
                    }
                    return Some(Fired::Timer { process, payload });
                }
                EventKind::Deliver { entry, to } => {
                    if self.is_crashed(to) {
                        self.pool.set_status(entry, to, DeliveryStatus::Cancelled);
                        continue;
                    }
                    let from = self.pool.entry(entry).sender;
                    let attempts = self.pool.bump_attempts(entry, to);
                    if from != to && self.cfg.loss > 0.0 && self.rng.gen_bool(self.cfg.loss.min(1.0))
                    {
                        match self.cfg.retransmit_after {
                            Some(after) => {
                                let delay = after + self.link_delay(from, to);
                                self.insert(self.now.after(delay), EventKind::Deliver { entry, to });
                            }
                            None => self.pool.set_status(entry, to, DeliveryStatus::Lost),
                        }
                        continue;
                    }
                    self.pool.set_status(
                        entry,
                        to,
                        DeliveryStatus::Delivered {
                            at: self.now,
                            attempts,
                        },
                    );
                    let msg = self.pool.entry(entry).payload.clone();
                    return Some(Fired::Deliver {
                        to,
                        from,
                        entry,
                        msg,
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type K = Kernel<u32, u32>;

    fn kernel(cfg: KernelConfig) -> K {
        Kernel::new(cfg)
    }

    #[test]
    fn empty_schedule_is_done() {
        let mut k = kernel(KernelConfig::default());
        assert!(k.step().is_none());
    }

    #[test]
    fn fixed_delay_fires_exactly_one_tick_later() {
        let mut k = kernel(KernelConfig::default());
        let key = k
            .schedule_timer(ProcessId::certifier(0), DelayBounds::fixed(1), 7)
            .unwrap();
        assert_eq!(key.time(), VirtualTime(1));
        match k.step() {
            Some(Fired::Timer { payload, .. }) => assert_eq!(payload, 7),
            other => panic!("{other:?}"),
        }
        assert_eq!(k.now(), VirtualTime(1));
        assert!(k.step().is_none());
    }

    #[test]
    fn same_tick_events_fire_in_seq_order() {
        let mut k = kernel(KernelConfig::default());
        for i in 0..5 {
            k.schedule_timer(ProcessId::certifier(0), DelayBounds::fixed(3), i)
                .unwrap();
        }
        let mut fired = Vec::new();
        while let Some(Fired::Timer { payload, .. }) = k.step() {
            fired.push(payload);
        }
        assert_eq!(fired, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn seeded_draws_repeat() {
        let draw = || {
            let mut k = kernel(KernelConfig {
                seed: 7,
                ..KernelConfig::default()
            });
            let b = DelayBounds { min: 1, max: 10 };
            (0..100).map(|_| b.draw(k.rng())).collect::<Vec<_>>()
        };
        let a = draw();
        assert_eq!(a, draw());
        assert!(a.iter().all(|d| (1..=10).contains(d)));
        assert!(a.iter().any(|&d| d != a[0]));
    }

    #[test]
    fn broadcast_schedules_independent_deliveries() {
        let mut k = kernel(KernelConfig::default());
        let to = [
            ProcessId::certifier(0),
            ProcessId::certifier(1),
            ProcessId::certifier(2),
        ];
        k.send(ProcessId::client(0), &to, PoolTag::Input, "PROPOSE", 1)
            .unwrap();
        let mut got = Vec::new();
        while let Some(Fired::Deliver { to, .. }) = k.step() {
            got.push(to);
        }
        assert_eq!(got, to.to_vec());
    }

    #[test]
    fn total_loss_without_retransmission_never_delivers() {
        let mut k = kernel(KernelConfig {
            loss: 1.0,
            retransmit_after: None,
            ..KernelConfig::default()
        });
        let e = k
            .send(
                ProcessId::client(0),
                &[ProcessId::certifier(0)],
                PoolTag::Input,
                "PROPOSE",
                1,
            )
            .unwrap();
        assert!(k.step().is_none());
        assert_eq!(
            k.pool().entry(e).deliveries[&ProcessId::certifier(0)],
            DeliveryStatus::Lost
        );
        // the pool still holds the message
        assert_eq!(k.pool().len(), 1);
    }

    #[test]
    fn lossy_link_with_retransmission_eventually_delivers() {
        let mut k = kernel(KernelConfig {
            seed: 3,
            loss: 0.5,
            ..KernelConfig::default()
        });
        k.send(
            ProcessId::client(0),
            &[ProcessId::certifier(0)],
            PoolTag::Input,
            "PROPOSE",
            9,
        );
        match k.step() {
            Some(Fired::Deliver { msg, .. }) => assert_eq!(msg, 9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn some_seed_reorders_two_sends() {
        let found = (0..200u64).find(|&seed| {
            let mut k = kernel(KernelConfig {
                seed,
                delay: DelayBounds { min: 1, max: 10 },
                ..KernelConfig::default()
            });
            let to = [ProcessId::certifier(1)];
            k.send(ProcessId::certifier(0), &to, PoolTag::Protocol, "A", 1);
            k.send(ProcessId::certifier(0), &to, PoolTag::Protocol, "B", 2);
            matches!(k.step(), Some(Fired::Deliver { msg: 2, .. }))
        });
        assert!(found.is_some());
    }

    #[test]
    fn crash_cancels_pending_and_stops_transitions() {
        let mut k = kernel(KernelConfig::default());
        let c = ProcessId::client(0);
        k.schedule_crash(c, VirtualTime(0)).unwrap();
        assert!(k.schedule_timer(c, DelayBounds::fixed(1), 1).is_ok());
        assert!(matches!(k.step(), Some(Fired::Crash { .. })));
        assert!(k.schedule_timer(c, DelayBounds::fixed(1), 2).is_err());
        assert!(k.send(c, &[c], PoolTag::Input, "PROPOSE", 1).is_none());
        assert!(k.step().is_none());
        assert_eq!(k.trace().len(), 1);
        assert_eq!(k.trace()[0].transition, "crash");
    }

    #[test]
    fn crash_threshold_is_enforced() {
        let mut k = kernel(KernelConfig::default());
        k.schedule_crash(ProcessId::certifier(0), VirtualTime(5))
            .unwrap();
        assert!(matches!(
            k.schedule_crash(ProcessId::certifier(1), VirtualTime(6)),
            Err(KernelError::ThresholdExceeded { .. })
        ));
        // clients are not bounded
        k.schedule_crash(ProcessId::client(0), VirtualTime(1)).unwrap();
        k.schedule_crash(ProcessId::client(1), VirtualTime(1)).unwrap();
        let mut k = kernel(KernelConfig {
            respect_threshold: false,
            ..KernelConfig::default()
        });
        k.schedule_crash(ProcessId::certifier(0), VirtualTime(5))
            .unwrap();
        k.schedule_crash(ProcessId::certifier(1), VirtualTime(5))
            .unwrap();
    }

    #[test]
    fn crash_in_past_is_rejected() {
        let mut k = kernel(KernelConfig::default());
        k.schedule_timer(ProcessId::client(0), DelayBounds::fixed(4), 0)
            .unwrap();
        k.step();
        assert!(matches!(
            k.schedule_crash(ProcessId::client(1), VirtualTime(2)),
            Err(KernelError::CrashInPast { .. })
        ));
    }

    #[test]
    fn aging_bounds_starvation_under_newest_first() {
        // A process keeps re-arming zero-delay timers; under newest-first
        // selection the original timer would starve without aging.
        let max_defer = 5;
        let mut k = kernel(KernelConfig {
            policy: SchedulePolicy::Newest,
            max_defer,
            ..KernelConfig::default()
        });
        let p = ProcessId::certifier(0);
        k.schedule_timer(p, DelayBounds::fixed(0), 0).unwrap();
        k.schedule_timer(p, DelayBounds::fixed(0), 1).unwrap();
        let mut fired_at = None;
        for step in 0..100 {
            match k.step() {
                Some(Fired::Timer { payload: 0, .. }) => {
                    fired_at = Some(step);
                    break;
                }
                Some(Fired::Timer { payload, .. }) => {
                    k.schedule_timer(p, DelayBounds::fixed(0), payload + 1)
                        .unwrap();
                }
                _ => unreachable!(),
            }
        }
        let fired_at = fired_at.expect("starved");
        assert!(fired_at <= max_defer as usize);
        assert!(k.max_observed_defer() <= max_defer);
    }
}
