//! Run metrics computed purely from a trace.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::kernel::{ProcessId, TraceEvent};
use crate::multiconsensus::RoundId;
use crate::specs::{Payload, Slot};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub commands_decided: usize,
    pub responses: usize,
    /// Decision messages (CERT and DECIDE deliveries) per decided command,
    /// over the middle 80% of decided slots.
    pub steady_decision_messages: Option<f64>,
    /// All message deliveries per decided command over the same slots.
    pub steady_total_messages: Option<f64>,
    /// Ticks from the certification completing a majority to the first
    /// replica learning the slot, per decided slot.
    pub decision_latency: Vec<u64>,
    pub latency_mean: Option<f64>,
    pub recoveries: usize,
    /// Ticks from the first support of a round to its recovery.
    pub recovery_durations: Vec<u64>,
    pub transitions: BTreeMap<String, usize>,
    pub end_time: u64,
}

#[derive(Default)]
struct SlotInfo {
    decided_at: Option<u64>,
    learned_at: Option<u64>,
    decision_msgs: usize,
    total_msgs: usize,
}

// Through text, since maps keyed by slot carry their keys as strings.
fn get<T: serde::de::DeserializeOwned>(params: &Value, key: &str) -> Option<T> {
    params.get(key).and_then(|v| serde_json::from_str(&v.to_string()).ok())
}

impl Metrics {
    /// `n` is the number of certifiers, which fixes the majority size.
    pub fn from_trace(trace: &[TraceEvent], n: usize) -> Metrics {
        let mut certs: BTreeMap<(Slot, RoundId, Payload), BTreeSet<ProcessId>> = BTreeMap::new();
        let mut logs: BTreeMap<RoundId, BTreeMap<Slot, Payload>> = BTreeMap::new();
        let mut slots: BTreeMap<Slot, SlotInfo> = BTreeMap::new();
        let mut first_support: BTreeMap<RoundId, u64> = BTreeMap::new();
        let mut recovery_durations = Vec::new();
        let mut transitions: BTreeMap<String, usize> = BTreeMap::new();
        let mut responses = 0;
        for ev in trace {
            *transitions.entry(ev.transition.clone()).or_default() += 1;
            let p = &ev.params;
            let t = ev.time.0;
            let mut add = |slot: Slot, round: RoundId, payload: Payload, who: ProcessId| {
                let set = certs.entry((slot, round, payload)).or_default();
                if set.insert(who) && 2 * set.len() > n {
                    let info = slots.entry(slot).or_default();
                    info.decided_at.get_or_insert(t);
                }
            };
            match ev.transition.as_str() {
                "certify_seq" | "certify" => {
                    if let (Some(s), Some(r), Some(pl)) = (get(p, "slot"), get(p, "round"), get(p, "payload")) {
                        add(s, r, pl, ev.process);
                    }
                }
                "recover" => {
                    let round: Option<RoundId> = get(p, "round");
                    let log: Option<BTreeMap<Slot, Payload>> = get(p, "log");
                    if let (Some(r), Some(log)) = (round, log) {
                        for (s, pl) in &log {
                            add(*s, r, pl.clone(), ev.process);
                        }
                        if let Some(start) = first_support.get(&r) {
                            recovery_durations.push(t - start);
                        }
                        logs.insert(r, log);
                    }
                }
                "adopt" => {
                    if let Some(r) = get::<RoundId>(p, "round") {
                        for (s, pl) in logs.get(&r).cloned().unwrap_or_default() {
                            add(s, r, pl, ev.process);
                        }
                    }
                }
                "support_round" => {
                    if let Some(r) = get(p, "round") {
                        first_support.entry(r).or_insert(t);
                    }
                }
                "observe_decision" => {
                    if let Some(s) = get(p, "slot") {
                        slots.entry(s).or_default().learned_at.get_or_insert(t);
                    }
                }
                "response" => responses += 1,
                "send" => {
                    let to = p.get("to").and_then(Value::as_array).map_or(0, Vec::len);
                    if let Some(s) = get::<Slot>(p, "slot") {
                        let info = slots.entry(s).or_default();
                        info.total_msgs += to;
                        let label = p.get("label").and_then(Value::as_str).unwrap_or("");
                        if label == "CERT" || label == "DECIDE" {
                            info.decision_msgs += to;
                        }
                    }
                }
                _ => {}
            }
        }
        let decided: Vec<(&Slot, &SlotInfo)> = slots.iter().filter(|(_, i)| i.decided_at.is_some()).collect();
        let k = decided.len();
        let cut = k / 10;
        let middle = &decided[cut..k - cut];
        let per_cmd = |f: fn(&SlotInfo) -> usize| {
            (!middle.is_empty()).then(|| middle.iter().map(|(_, i)| f(i)).sum::<usize>() as f64 / middle.len() as f64)
        };
        let decision_latency: Vec<u64> = decided
            .iter()
            .filter_map(|(_, i)| Some(i.learned_at?.saturating_sub(i.decided_at?)))
            .collect();
        let latency_mean = (!decision_latency.is_empty())
            .then(|| decision_latency.iter().sum::<u64>() as f64 / decision_latency.len() as f64);
        Metrics {
            commands_decided: k,
            responses,
            steady_decision_messages: per_cmd(|i| i.decision_msgs),
            steady_total_messages: per_cmd(|i| i.total_msgs),
            decision_latency,
            latency_mean,
            recoveries: transitions.get("recover").copied().unwrap_or(0),
            recovery_durations,
            transitions,
            end_time: trace.last().map_or(0, |e| e.time.0),
        }
    }
}
