use serde_json::{json, Value};

use crate::kernel::{DelayBounds, EventKey, Kernel, ProcessId};
use crate::multiconsensus::{McEvent, McState, NewDecisions};

use super::{CrashTrigger, Dissemination, Msg, Protocol, Timer, Timers};

struct Armed {
    trigger: CrashTrigger,
    seen: usize,
}

/// Everything an engine step may touch besides its own node: the kernel,
/// the online monitor and static topology.
pub(crate) struct Env {
    pub k: Kernel<Msg, Timer>,
    pub monitor: Option<McState>,
    pub violations: Vec<String>,
    pub timers: Timers,
    pub protocol: Protocol,
    pub dissemination: Dissemination,
    pub certifiers: Vec<ProcessId>,
    pub replicas: Vec<ProcessId>,
    triggers: Vec<Armed>,
}

impl Env {
    pub fn new(
        k: Kernel<Msg, Timer>,
        monitor: Option<McState>,
        timers: Timers,
        protocol: Protocol,
        dissemination: Dissemination,
        certifiers: Vec<ProcessId>,
        replicas: Vec<ProcessId>,
        triggers: &[CrashTrigger],
    ) -> Self {
        Self {
            k,
            monitor,
            violations: Vec::new(),
            timers,
            protocol,
            dissemination,
            certifiers,
            replicas,
            triggers: triggers
                .iter()
                .map(|t| Armed {
                    trigger: t.clone(),
                    seen: 0,
                })
                .collect(),
        }
    }

    pub fn now(&self) -> u64 {
        self.k.now().0
    }

    pub fn is_majority(&self, count: usize) -> bool {
        2 * count > self.certifiers.len()
    }

    pub fn others(&self, me: ProcessId) -> Vec<ProcessId> {
        self.certifiers.iter().copied().filter(|&c| c != me).collect()
    }

    fn record(&mut self, p: ProcessId, transition: &str, params: Value) {
        if self.k.is_crashed(p) {
            return;
        }
        let slot = params.get("slot").and_then(Value::as_u64);
        self.k.record(p, transition, params);
        for a in &mut self.triggers {
            let t = &a.trigger;
            if t.on == transition && t.by.is_none_or(|b| b == p) && t.slot.is_none_or(|s| Some(s) == slot) {
                a.seen += 1;
                if a.seen == t.nth {
                    let (process, now) = (t.process, self.k.now());
                    if let Err(e) = self.k.schedule_crash(process, now) {
                        self.violations.push(format!("crash trigger for {process}: {e}"));
                    }
                }
            }
        }
    }

    /// Trace and send one message to every recipient.
    pub fn send(&mut self, from: ProcessId, to: &[ProcessId], msg: Msg) {
        if to.is_empty() || self.k.is_crashed(from) {
            return;
        }
        let params = json!({"label": msg.label(), "to": to, "slot": msg.slot()});
        self.record(from, "send", params);
        self.k.send(from, to, msg.tag(), msg.label(), msg);
    }

    /// Trace a multi-consensus transition and feed it to the monitor.
    pub fn mc(&mut self, p: ProcessId, ev: McEvent) -> NewDecisions {
        if self.k.is_crashed(p) {
            return Vec::new();
        }
        let mut params = serde_json::to_value(&ev).expect("events serialize");
        if let Value::Object(m) = &mut params {
            m.remove("transition");
        }
        let seq = self.k.trace().len() as u64 + 1;
        self.record(p, ev.name(), params);
        match self.monitor.as_mut().map(|m| m.apply(&ev)) {
            Some(Err(b)) => {
                self.violations.push(format!("event {seq} by {p}: {b}"));
                Vec::new()
            }
            Some(Ok(d)) => d,
            None => Vec::new(),
        }
    }

    /// Trace a stutter.
    pub fn note(&mut self, p: ProcessId, name: &str, params: Value) {
        self.record(p, name, params);
    }

    pub fn timer(&mut self, p: ProcessId, delay: u64, t: Timer) -> Option<EventKey> {
        self.k.schedule_timer(p, DelayBounds::fixed(delay.max(1)), t).ok()
    }
}
