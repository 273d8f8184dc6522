//! Refinement mappings between the specification levels and a checker
//! that replays a trace through a chain of them.
//!
//! Each mapping keeps the concrete state of its source level and the
//! abstract state of its target level. Every concrete event is applied to
//! the concrete state, classified into zero or more abstract events (zero
//! is a stutter), those are applied to the abstract state, and the
//! projection of the concrete state must then equal the abstract state.

mod explore;
pub mod fixtures;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::app::{AppState, Command};
use crate::engines::Scenario;
use crate::kernel::{ProcessId, TraceEvent, VirtualTime};
use crate::multiconsensus::{McEvent, McMode, McState, RoundId};
use crate::specs::{Payload, ReplEvent, ReplicaVars, ReplicationState, ServiceEvent, ServiceState, Slot, Style};

pub use explore::{explore, path_to_trace, ExploreBounds, ExploreReport, Goal, Property};

/// Trace transitions that never change multi-consensus state.
pub const STUTTERS: &[&str] = &[
    "send",
    "ignored",
    "decision_known",
    "speculative_apply",
    "rollback",
    "fetch",
    "retry",
    "crash",
    "appoint",
    "resume",
    "abandon",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mapping {
    #[serde(rename = "engine-mc")]
    EngineToMc,
    #[serde(rename = "engine-mcpo")]
    EngineToMcPo,
    #[serde(rename = "mc-active")]
    McToActive,
    #[serde(rename = "mcpo-passive")]
    McPoToPassive,
    #[serde(rename = "passive-active")]
    PassiveToActive,
    #[serde(rename = "active-linearizable")]
    ActiveToLinearizable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Level {
    Engine,
    Mc,
    Active,
    Passive,
    Linearizable,
}

impl Mapping {
    pub const ALL: [Mapping; 6] = [
        Mapping::EngineToMc,
        Mapping::EngineToMcPo,
        Mapping::McToActive,
        Mapping::McPoToPassive,
        Mapping::PassiveToActive,
        Mapping::ActiveToLinearizable,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mapping::EngineToMc => "engine-mc",
            Mapping::EngineToMcPo => "engine-mcpo",
            Mapping::McToActive => "mc-active",
            Mapping::McPoToPassive => "mcpo-passive",
            Mapping::PassiveToActive => "passive-active",
            Mapping::ActiveToLinearizable => "active-linearizable",
        }
    }

    fn levels(self) -> (Level, Level) {
        match self {
            Mapping::EngineToMc | Mapping::EngineToMcPo => (Level::Engine, Level::Mc),
            Mapping::McToActive => (Level::Mc, Level::Active),
            Mapping::McPoToPassive => (Level::Mc, Level::Passive),
            Mapping::PassiveToActive => (Level::Passive, Level::Active),
            Mapping::ActiveToLinearizable => (Level::Active, Level::Linearizable),
        }
    }

    /// The full chain from engine traces down to the linearizable service.
    pub fn chain_for(mode: McMode) -> Vec<Mapping> {
        match mode {
            McMode::Plain => vec![Mapping::EngineToMc, Mapping::McToActive, Mapping::ActiveToLinearizable],
            McMode::PrefixOrdered => vec![
                Mapping::EngineToMcPo,
                Mapping::McPoToPassive,
                Mapping::PassiveToActive,
                Mapping::ActiveToLinearizable,
            ],
        }
    }
}

impl fmt::Display for Mapping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mapping {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Mapping::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mapping {s:?}"))
    }
}

/// Parse a chain written as `engine-mc,mc-active,...`.
pub fn parse_chain(s: &str) -> Result<Vec<Mapping>, String> {
    s.split(',').map(|m| m.trim().parse()).collect()
}

/// Topology and initial state needed to replay a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckConfig {
    pub mode: McMode,
    pub style: Style,
    pub certifiers: Vec<ProcessId>,
    pub replicas: Vec<ProcessId>,
    pub initial: AppState,
    pub initial_sequencer: Option<ProcessId>,
}

impl CheckConfig {
    pub fn for_scenario(sc: &Scenario) -> Self {
        let passive = sc.protocol.is_passive();
        Self {
            mode: if passive { McMode::PrefixOrdered } else { McMode::Plain },
            style: if passive { Style::Passive } else { Style::Active },
            certifiers: sc.certifiers(),
            replicas: sc.replica_ids(),
            initial: sc.app.initial_state(),
            initial_sequencer: Some(ProcessId::certifier(sc.initial_sequencer)),
        }
    }

    fn mc_state(&self, mode: McMode) -> McState {
        McState::new(
            mode,
            self.style,
            self.initial.clone(),
            &self.certifiers,
            &self.replicas,
            self.initial_sequencer,
        )
    }

    fn members(&self) -> BTreeSet<ProcessId> {
        self.certifiers.iter().chain(&self.replicas).copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum Status {
    Accepted,
    Rejected {
        seq: u64,
        reason: String,
        before: Value,
        after: Value,
    },
    /// An earlier mapping in the chain rejected the trace first.
    NotReached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub mapping: Mapping,
    #[serde(flatten)]
    pub status: Status,
    /// Abstract transitions this mapping produced.
    pub abstract_events: usize,
    pub stutters: usize,
}

impl Verdict {
    pub fn accepted(&self) -> bool {
        self.status == Status::Accepted
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CheckError {
    #[error("mappings {0} and {1} do not compose")]
    Chain(Mapping, Mapping),
    #[error("empty mapping chain")]
    EmptyChain,
    #[error("malformed trace at event {seq}: {reason}")]
    Malformed { seq: u64, reason: String },
}

/// decisions[slot] = cmd iff more than n/2 certifiers certified cmd for
/// the slot within one round.
pub fn derive_decisions(
    certified: &BTreeMap<(Slot, RoundId), BTreeMap<Payload, BTreeSet<ProcessId>>>,
    n: usize,
) -> Result<BTreeMap<Slot, Payload>, String> {
    let mut out: BTreeMap<Slot, Payload> = BTreeMap::new();
    for ((slot, _), by_payload) in certified {
        for (payload, who) in by_payload {
            if 2 * who.len() <= n {
                continue;
            }
            match out.get(slot) {
                Some(p) if p != payload => {
                    return Err(format!("slot {slot} has two decided payloads: {p} and {payload}"));
                }
                _ => {
                    out.insert(*slot, payload.clone());
                }
            }
        }
    }
    Ok(out)
}

/// The state of the replica with the highest version; replicas sharing that
/// version must agree.
pub fn derive_service_state(replicas: &BTreeMap<ProcessId, ReplicaVars>) -> Result<AppState, String> {
    let top = replicas.values().map(|r| r.version).max().ok_or("no replicas")?;
    let mut leaders = replicas.iter().filter(|(_, r)| r.version == top);
    let (first, lead) = leaders.next().expect("max exists");
    for (other, r) in leaders {
        if r.state.digest() != lead.state.digest() {
            return Err(format!("{first} and {other} disagree at version {top}"));
        }
    }
    Ok(lead.state.clone())
}

enum Item {
    Mc(McEvent),
    Repl(ReplEvent),
    Service,
}

type StepResult = Result<Vec<Item>, String>;

enum Abstract {
    Mc(McState),
    Repl(ReplicationState),
    Service(ServiceState),
}

impl Abstract {
    fn json(&self) -> Value {
        match self {
            Abstract::Mc(s) => mc_json(s),
            Abstract::Repl(s) => to_value(s),
            Abstract::Service(s) => to_value(s),
        }
    }
}

enum Stage {
    EngineMc {
        state: McState,
    },
    McRepl {
        conc: McState,
        abs: ReplicationState,
    },
    PassiveActive {
        conc: ReplicationState,
        abs: ReplicationState,
    },
    ActiveLin {
        conc: ReplicationState,
        abs: ServiceState,
    },
}

fn to_value<T: Serialize>(t: &T) -> Value {
    serde_json::to_value(t).unwrap_or(Value::Null)
}

/// JSON view of a multi-consensus state; maps keyed by pairs become lists.
fn mc_json(s: &McState) -> Value {
    let certified: Vec<Value> = s
        .certified
        .iter()
        .flat_map(|((slot, round), by)| {
            by.iter()
                .map(move |(p, who)| serde_json::json!({"slot": slot, "round": round, "payload": p, "by": who}))
        })
        .collect();
    let snapshots: Vec<&crate::multiconsensus::Snapshot> = s.snapshots.values().collect();
    serde_json::json!({
        "mode": s.mode,
        "certifiers": s.certifiers,
        "certified": certified,
        "snapshots": snapshots,
        "recovered": s.recovered,
        "replication": s.repl,
        "violations": s.violations,
    })
}

fn project_mc(mc: &McState) -> Result<ReplicationState, String> {
    let mut repl = mc.repl.clone();
    repl.decisions = derive_decisions(&mc.certified, mc.n)?;
    Ok(repl)
}

fn cmd_of(p: &Payload) -> Payload {
    Payload::Command(p.command().clone())
}

fn project_passive(conc: &ReplicationState) -> ReplicationState {
    let mut abs = ReplicationState::new(Style::Active, conc.initial.clone(), conc.replicas.keys().copied());
    abs.inputs = conc.inputs.clone();
    abs.outputs = conc.outputs.clone();
    abs.invoked = conc.invoked.clone();
    abs.received = conc.received.clone();
    abs.decisions = conc.decisions.iter().map(|(s, p)| (*s, cmd_of(p))).collect();
    for (r, v) in &conc.replicas {
        let a = abs.replicas.get_mut(r).expect("same replicas");
        a.proposals = v
            .proposals
            .iter()
            .map(|(s, ps)| (*s, ps.iter().map(cmd_of).collect()))
            .collect();
        a.learned = v.learned.iter().map(|(s, p)| (*s, cmd_of(p))).collect();
        a.state = v.state.clone();
        a.version = v.version;
    }
    abs
}

fn project_active(conc: &ReplicationState) -> Result<ServiceState, String> {
    Ok(ServiceState {
        inputs: conc.inputs.clone(),
        outputs: conc.outputs.clone(),
        state: derive_service_state(&conc.replicas)?,
        invoked: conc.invoked.clone(),
        received: conc.received.clone(),
    })
}

fn mismatch<T: PartialEq + Serialize>(projected: &T, abs: &T) -> Result<(), String> {
    if projected == abs {
        return Ok(());
    }
    let (p, a) = (to_value(projected), to_value(abs));
    let fields: Vec<String> = match (&p, &a) {
        (Value::Object(pm), Value::Object(am)) => pm
            .iter()
            .filter(|(k, v)| am.get(*k) != Some(*v))
            .map(|(k, _)| k.clone())
            .collect(),
        _ => Vec::new(),
    };
    Err(format!("projection differs from abstract state in {}", fields.join(", ")))
}

impl Stage {
    fn new(m: Mapping, cfg: &CheckConfig, mode: McMode) -> Stage {
        match m {
            Mapping::EngineToMc | Mapping::EngineToMcPo => Stage::EngineMc {
                state: cfg.mc_state(mode),
            },
            Mapping::McToActive | Mapping::McPoToPassive => Stage::McRepl {
                conc: cfg.mc_state(mode),
                abs: ReplicationState::new(cfg.style, cfg.initial.clone(), cfg.members()),
            },
            Mapping::PassiveToActive => Stage::PassiveActive {
                conc: ReplicationState::new(Style::Passive, cfg.initial.clone(), cfg.members()),
                abs: ReplicationState::new(Style::Active, cfg.initial.clone(), cfg.members()),
            },
            Mapping::ActiveToLinearizable => Stage::ActiveLin {
                conc: ReplicationState::new(Style::Active, cfg.initial.clone(), cfg.members()),
                abs: ServiceState::new(cfg.initial.clone()),
            },
        }
    }

    fn abstract_state(&self) -> Abstract {
        match self {
            Stage::EngineMc { state } => Abstract::Mc(state.clone()),
            Stage::McRepl { abs, .. } | Stage::PassiveActive { abs, .. } => Abstract::Repl(abs.clone()),
            Stage::ActiveLin { abs, .. } => Abstract::Service(abs.clone()),
        }
    }

    fn step(&mut self, item: Item) -> StepResult {
        match (self, item) {
            (Stage::EngineMc { state }, Item::Mc(ev)) => {
                let seen = state.violations.len();
                state.apply(&ev).map_err(|b| b.to_string())?;
                if let Some(v) = state.violations.get(seen) {
                    return Err(v.clone());
                }
                Ok(vec![Item::Mc(ev)])
            }
            (Stage::McRepl { conc, abs }, Item::Mc(ev)) => {
                let decided = conc.apply(&ev).map_err(|b| format!("concrete transition not enabled: {b}"))?;
                let out: Vec<ReplEvent> = match &ev {
                    McEvent::ObserveDecision { replica, slot, .. } => vec![ReplEvent::Learn {
                        replica: *replica,
                        slot: *slot,
                    }],
                    McEvent::SupportRound { .. } => Vec::new(),
                    e => match e.as_inherited() {
                        Some(inherited) => vec![inherited],
                        None => decided
                            .into_iter()
                            .map(|(slot, payload)| ReplEvent::Decide { slot, payload })
                            .collect(),
                    },
                };
                for a in &out {
                    abs.apply(a).map_err(|b| format!("abstract {b}"))?;
                }
                mismatch(&project_mc(conc)?, abs)?;
                Ok(out.into_iter().map(Item::Repl).collect())
            }
            (Stage::PassiveActive { conc, abs }, Item::Repl(ev)) => {
                conc.apply(&ev).map_err(|b| format!("concrete transition not enabled: {b}"))?;
                let out = match ev {
                    ReplEvent::Propose { replica, slot, payload } => vec![ReplEvent::Propose {
                        replica,
                        slot,
                        payload: cmd_of(&payload),
                    }],
                    ReplEvent::Decide { slot, payload } => vec![ReplEvent::Decide {
                        slot,
                        payload: cmd_of(&payload),
                    }],
                    ReplEvent::ResetShadow { .. } => Vec::new(),
                    other => vec![other],
                };
                for a in &out {
                    abs.apply(a).map_err(|b| format!("abstract {b}"))?;
                }
                mismatch(&project_passive(conc), abs)?;
                Ok(out.into_iter().map(Item::Repl).collect())
            }
            (Stage::ActiveLin { conc, abs }, Item::Repl(ev)) => {
                let top = conc.replicas.values().map(|r| r.version).max().unwrap_or(1);
                let leading = match &ev {
                    ReplEvent::Update { replica, .. } => conc.replica(*replica).is_some_and(|r| r.version == top),
                    _ => false,
                };
                conc.apply(&ev).map_err(|b| format!("concrete transition not enabled: {b}"))?;
                let out = match ev {
                    ReplEvent::Invoke { client, op } => vec![ServiceEvent::Invoke { client, op }],
                    ReplEvent::Response { client, op, result } => vec![ServiceEvent::Response { client, op, result }],
                    ReplEvent::Update {
                        cmd: Command { client, op },
                        result,
                        new_state,
                        ..
                    } if leading => vec![ServiceEvent::Execute {
                        client,
                        op,
                        result,
                        new_state,
                    }],
                    _ => Vec::new(),
                };
                for a in &out {
                    abs.apply(a).map_err(|b| format!("abstract {b}"))?;
                }
                mismatch(&project_active(conc)?, abs)?;
                Ok(out.iter().map(|_| Item::Service).collect())
            }
            _ => Err("event of the wrong level for this mapping".into()),
        }
    }

    fn finish(&self) -> Result<(), String> {
        match self {
            Stage::EngineMc { state } => match state.check_invariants().first() {
                Some(v) => Err(format!("invariant violated: {v}")),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }
}

fn event_json(ev: &TraceEvent) -> Value {
    let mut obj = match &ev.params {
        Value::Object(m) => m.clone(),
        _ => serde_json::Map::new(),
    };
    obj.insert("transition".into(), Value::String(ev.transition.clone()));
    Value::Object(obj)
}

fn parse(ev: &TraceEvent, level: Level) -> Result<Option<Item>, CheckError> {
    let malformed = |reason: String| CheckError::Malformed { seq: ev.seq, reason };
    if STUTTERS.contains(&ev.transition.as_str()) {
        return Ok(None);
    }
    match level {
        Level::Engine | Level::Mc => serde_json::from_str::<McEvent>(&event_json(ev).to_string())
            .map(|e| Some(Item::Mc(e)))
            .map_err(|e| malformed(format!("transition {:?}: {e}", ev.transition))),
        Level::Active | Level::Passive => serde_json::from_str::<ReplEvent>(&event_json(ev).to_string())
            .map(|e| Some(Item::Repl(e)))
            .map_err(|e| malformed(format!("transition {:?}: {e}", ev.transition))),
        Level::Linearizable => Err(malformed("no mapping starts at the linearizable level".into())),
    }
}

/// Replay `trace` through every mapping of `chain`, in order.
pub fn check_chain(trace: &[TraceEvent], cfg: &CheckConfig, chain: &[Mapping]) -> Result<Vec<Verdict>, CheckError> {
    let first = *chain.first().ok_or(CheckError::EmptyChain)?;
    for w in chain.windows(2) {
        if w[0].levels().1 != w[1].levels().0 {
            return Err(CheckError::Chain(w[0], w[1]));
        }
    }
    let mode = match first {
        Mapping::EngineToMc => McMode::Plain,
        Mapping::EngineToMcPo => McMode::PrefixOrdered,
        _ => cfg.mode,
    };
    let mut stages: Vec<Stage> = chain.iter().map(|m| Stage::new(*m, cfg, mode)).collect();
    let mut verdicts: Vec<Verdict> = chain
        .iter()
        .map(|m| Verdict {
            mapping: *m,
            status: Status::Accepted,
            abstract_events: 0,
            stutters: 0,
        })
        .collect();
    let mut failed = false;
    'events: for ev in trace {
        let Some(item) = parse(ev, first.levels().0)? else {
            verdicts[0].stutters += 1;
            continue;
        };
        let mut items = vec![item];
        for (i, stage) in stages.iter_mut().enumerate() {
            let mut next = Vec::new();
            for it in items {
                let before = stage.abstract_state();
                match stage.step(it) {
                    Ok(out) => {
                        if out.is_empty() {
                            verdicts[i].stutters += 1;
                        }
                        verdicts[i].abstract_events += out.len();
                        next.extend(out);
                    }
                    Err(reason) => {
                        verdicts[i].status = Status::Rejected {
                            seq: ev.seq,
                            reason,
                            before: before.json(),
                            after: stage.abstract_state().json(),
                        };
                        failed = true;
                        for v in &mut verdicts[i + 1..] {
                            v.status = Status::NotReached;
                        }
                        break 'events;
                    }
                }
            }
            items = next;
        }
    }
    if !failed {
        let last = trace.last().map_or(0, |e| e.seq);
        for (i, stage) in stages.iter().enumerate() {
            if let Err(reason) = stage.finish() {
                let after = stage.abstract_state().json();
                verdicts[i].status = Status::Rejected {
                    seq: last,
                    reason,
                    before: after.clone(),
                    after,
                };
                break;
            }
        }
    }
    Ok(verdicts)
}

/// The multi-consensus transitions of an engine trace, stutters removed.
pub fn mc_events(trace: &[TraceEvent]) -> Result<Vec<McEvent>, CheckError> {
    let mut out = Vec::new();
    for ev in trace {
        if let Some(Item::Mc(e)) = parse(ev, Level::Engine)? {
            out.push(e);
        }
    }
    Ok(out)
}

/// Check a trace produced by running `sc` along its full chain.
pub fn check_scenario_trace(trace: &[TraceEvent], sc: &Scenario) -> Result<Vec<Verdict>, CheckError> {
    let cfg = CheckConfig::for_scenario(sc);
    check_chain(trace, &cfg, &Mapping::chain_for(cfg.mode))
}

/// The process that performs a multi-consensus transition.
pub fn actor(ev: &McEvent) -> ProcessId {
    match ev {
        McEvent::Invoke { client, .. } | McEvent::Response { client, .. } => *client,
        McEvent::Propose { replica, .. }
        | McEvent::Update { replica, .. }
        | McEvent::ResetShadow { replica, .. }
        | McEvent::ObserveDecision { replica, .. } => *replica,
        McEvent::CertifySeq { certifier, .. }
        | McEvent::Certify { certifier, .. }
        | McEvent::SupportRound { certifier, .. }
        | McEvent::Recover { certifier, .. }
        | McEvent::Adopt { certifier, .. } => *certifier,
    }
}

/// A trace record for a multi-consensus transition.
pub fn mc_trace_event(seq: u64, time: u64, ev: &McEvent) -> TraceEvent {
    let mut params = to_value(ev);
    if let Value::Object(m) = &mut params {
        m.remove("transition");
    }
    TraceEvent {
        seq,
        time: VirtualTime(time),
        process: actor(ev),
        transition: ev.name().to_string(),
        params,
    }
}

#[cfg(test)]
mod tests;
