//! Deliberately broken traces that a sound checker must reject.

use serde_json::Value;

use crate::app::{AppState, Command, OpKind, Operation};
use crate::kernel::{ProcessId, TraceEvent};
use crate::multiconsensus::McMode;
use crate::specs::Style;

use super::{explore, path_to_trace, CheckConfig, ExploreBounds, Goal, Property};

/// Replace the payload of the first follower certification with the
/// payload of a later slot.
pub fn tamper_payload(trace: &[TraceEvent]) -> Option<Vec<TraceEvent>> {
    let certs: Vec<usize> = trace
        .iter()
        .enumerate()
        .filter(|(_, e)| e.transition == "certify" || e.transition == "certify_seq")
        .map(|(i, _)| i)
        .collect();
    let first = *certs.iter().find(|&&i| trace[i].transition == "certify")?;
    let slot = trace[first].params.get("slot").cloned();
    let other = certs
        .iter()
        .map(|&i| &trace[i].params)
        .find(|p| p.get("slot") != slot.as_ref())?
        .get("payload")?
        .clone();
    let mut out = trace.to_vec();
    if let Value::Object(m) = &mut out[first].params {
        m.insert("payload".into(), other);
    }
    Some(out)
}

/// Remove every certification of slot 1 made by a follower.
pub fn drop_certifications(trace: &[TraceEvent]) -> Option<Vec<TraceEvent>> {
    let hit = |e: &TraceEvent| e.transition == "certify" && e.params.get("slot").and_then(Value::as_u64) == Some(1);
    trace.iter().any(hit).then(|| trace.iter().filter(|e| !hit(e)).cloned().collect())
}

/// Register starting at 3 with an increment and a doubling submitted
/// concurrently, over three certifiers and two replicas.
pub fn register_race(mode: McMode, state_cap: usize) -> ExploreBounds {
    ExploreBounds {
        n: 3,
        replicas: 2,
        mode,
        style: Style::Passive,
        initial: AppState::Register { value: 3 },
        commands: vec![
            Command::new(ProcessId::client(0), Operation::new(1, OpKind::Inc)),
            Command::new(ProcessId::client(1), Operation::new(1, OpKind::Double)),
        ],
        max_round: 1,
        max_slots: 2,
        state_cap,
        properties: match mode {
            McMode::Plain => vec![Property::Agreement, Property::RoundSlotUnique, Property::SingleSequencer],
            McMode::PrefixOrdered => Property::ALL.to_vec(),
        },
        goal: Some(Goal::DecidedStates(vec![
            AppState::Register { value: 4 },
            AppState::Register { value: 7 },
        ])),
        reset_shadow: false,
    }
}

/// A multi-consensus trace without prefix ordering in which a replica
/// applies 4 and then 7, with the configuration it was produced under.
pub fn prefix_anomaly(state_cap: usize) -> Option<(Vec<TraceEvent>, CheckConfig)> {
    let b = register_race(McMode::Plain, state_cap);
    let path = explore(&b).goal?;
    let cfg = CheckConfig {
        mode: McMode::Plain,
        style: Style::Passive,
        certifiers: (0..b.n as u32).map(ProcessId::certifier).collect(),
        replicas: (0..b.replicas as u32).map(ProcessId::replica).collect(),
        initial: b.initial.clone(),
        initial_sequencer: Some(ProcessId::certifier(0)),
    };
    Some((path_to_trace(&path), cfg))
}
