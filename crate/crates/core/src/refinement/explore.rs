//! Bounded exhaustive exploration of the multi-consensus specification.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::Xxh3;

use crate::app::{AppState, Command};
use crate::kernel::{ProcessId, TraceEvent};
use crate::multiconsensus::{McEvent, McMode, McState, Progress, RoundId};
use crate::specs::{Payload, ReplEvent, Slot, Style};

use super::mc_trace_event;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Property {
    /// At most one payload decided per slot.
    Agreement,
    /// At most one payload certified per slot within a round.
    RoundSlotUnique,
    /// At most one sequencer per round.
    SingleSequencer,
    /// Decided updates form a chain from the initial state.
    PrefixOrder,
    /// The specification's own checks, including replica invariants.
    Invariants,
}

impl Property {
    pub const ALL: [Property; 5] = [
        Property::Agreement,
        Property::RoundSlotUnique,
        Property::SingleSequencer,
        Property::PrefixOrder,
        Property::Invariants,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Goal {
    /// Slots 1.. are decided as updates yielding exactly these states.
    DecidedStates(Vec<AppState>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExploreBounds {
    pub n: usize,
    /// Replicas that propose, learn and apply.
    pub replicas: usize,
    pub mode: McMode,
    pub style: Style,
    pub initial: AppState,
    /// Invoked before exploration starts.
    pub commands: Vec<Command>,
    /// Rounds 0..=max_round; round k is coordinated by certifier k mod n.
    pub max_round: u32,
    pub max_slots: Slot,
    pub state_cap: usize,
    pub properties: Vec<Property>,
    #[serde(default)]
    pub goal: Option<Goal>,
    #[serde(default)]
    pub reset_shadow: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Counterexample {
    pub property: Property,
    pub reason: String,
    pub path: Vec<McEvent>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExploreReport {
    pub states: usize,
    pub transitions: usize,
    pub max_depth: usize,
    /// False when the state cap stopped the search.
    pub complete: bool,
    pub violation: Option<Counterexample>,
    pub goal: Option<Vec<McEvent>>,
}

fn fingerprint(s: &McState) -> u128 {
    let mut h = Xxh3::new();
    s.hash(&mut h);
    h.digest128()
}

struct Explorer<'a> {
    b: &'a ExploreBounds,
    certifiers: Vec<ProcessId>,
    replicas: Vec<ProcessId>,
    rounds: Vec<(RoundId, ProcessId)>,
    quorums: Vec<BTreeSet<ProcessId>>,
}

impl Explorer<'_> {
    fn successors(&self, s: &McState) -> Vec<(McEvent, McState)> {
        let mut cands: Vec<McEvent> = Vec::new();
        for ev in s.repl.enabled(&[], self.b.max_slots) {
            let mc = match ev {
                ReplEvent::Propose { replica, slot, payload } if self.replicas.contains(&replica) => {
                    McEvent::Propose { replica, slot, payload }
                }
                ReplEvent::ResetShadow { replica, version, state }
                    if self.b.reset_shadow && self.replicas.contains(&replica) =>
                {
                    McEvent::ResetShadow { replica, version, state }
                }
                _ => continue,
            };
            cands.push(mc);
        }
        let proposed: BTreeMap<Slot, BTreeSet<&Payload>> =
            s.repl.replicas.values().fold(BTreeMap::new(), |mut acc, r| {
                for (slot, ps) in &r.proposals {
                    acc.entry(*slot).or_default().extend(ps);
                }
                acc
            });
        for (&c, st) in &s.certifiers {
            if st.is_seq {
                if let Some(slot) = st.lowest_empty(st.cert_bev).filter(|&sl| sl <= self.b.max_slots) {
                    for p in proposed.get(&slot).into_iter().flatten() {
                        cands.push(McEvent::CertifySeq {
                            certifier: c,
                            slot,
                            round: st.cert_bev,
                            payload: (*p).clone(),
                        });
                    }
                }
            }
            for ((slot, round), by) in &s.certified {
                if *round != st.cert_bev || (s.mode == McMode::PrefixOrdered && st.floor != *round) {
                    continue;
                }
                for p in by.keys() {
                    if !Progress::of(*round, p.clone()).succeeds(&st.progress(*slot)) {
                        continue;
                    }
                    cands.push(McEvent::Certify {
                        certifier: c,
                        slot: *slot,
                        round: *round,
                        payload: p.clone(),
                    });
                }
            }
            for &(round, coord) in &self.rounds {
                if round > st.cert_bev {
                    cands.push(McEvent::SupportRound {
                        certifier: c,
                        round,
                        coord,
                    });
                }
            }
            if !st.is_seq && !s.recovered.contains_key(&st.cert_bev) {
                if let Some(&(round, coord)) = self.rounds.iter().find(|(r, _)| *r == st.cert_bev) {
                    let has = |q: &ProcessId| s.snapshots.get(&(*q, round)).is_some_and(|sn| sn.coord == coord);
                    for from in self.quorums.iter().filter(|f| f.iter().all(has)) {
                        cands.push(McEvent::Recover {
                            certifier: c,
                            round,
                            coord,
                            from: from.clone(),
                            log: None,
                        });
                    }
                }
            }
            let adoptable = s.recovered.get(&st.cert_bev).is_some_and(|r| r.sequencer != c);
            if s.mode == McMode::PrefixOrdered && st.floor < st.cert_bev && adoptable {
                cands.push(McEvent::Adopt {
                    certifier: c,
                    round: st.cert_bev,
                });
            }
        }
        cands
            .into_iter()
            .filter_map(|ev| {
                let mut next = s.clone();
                next.apply(&ev).ok()?;
                (next != *s).then_some((ev, next))
            })
            .collect()
    }

    fn check(&self, s: &McState) -> Option<(Property, String)> {
        for &p in &self.b.properties {
            if let Some(reason) = violated(p, s) {
                return Some((p, reason));
            }
        }
        None
    }

    fn reached(&self, s: &McState) -> bool {
        let Some(Goal::DecidedStates(states)) = &self.b.goal else {
            return false;
        };
        states.iter().enumerate().all(|(i, want)| {
            s.repl
                .decisions
                .get(&(i as Slot + 1))
                .and_then(Payload::as_update)
                .is_some_and(|u| &u.new == want)
        })
    }

    /// Have the first replica learn and apply every decided slot.
    fn apply_all(&self, s: &McState) -> Vec<McEvent> {
        let r = self.replicas[0];
        let mut s = s.clone();
        let mut out = Vec::new();
        for (slot, payload) in s.repl.decisions.clone() {
            out.push(McEvent::ObserveDecision {
                replica: r,
                slot,
                payload,
            });
        }
        for ev in &out {
            s.apply(ev).expect("decided slots can be learned");
        }
        loop {
            let next = s.repl.enabled(&[], 0).into_iter().find_map(|e| match e {
                ReplEvent::Update {
                    replica,
                    cmd,
                    result,
                    new_state,
                } if replica == r => Some(McEvent::Update {
                    replica,
                    cmd,
                    result,
                    new_state,
                }),
                _ => None,
            });
            let Some(ev) = next else {
                return out;
            };
            s.apply(&ev).expect("enabled");
            out.push(ev);
        }
    }
}

fn violated(p: Property, s: &McState) -> Option<String> {
    match p {
        Property::Agreement => s
            .majority_decisions()
            .into_iter()
            .find(|(_, ps)| ps.len() > 1)
            .map(|(slot, ps)| format!("slot {slot} has {} decided payloads", ps.len())),
        Property::RoundSlotUnique => s
            .certified
            .iter()
            .find(|(_, by)| by.len() > 1)
            .map(|((slot, round), _)| format!("slot {slot} has two payloads in round {round}")),
        Property::SingleSequencer => {
            let mut seen = BTreeMap::new();
            for (c, st) in &s.certifiers {
                if st.is_seq {
                    if let Some(other) = seen.insert(st.cert_bev, *c) {
                        return Some(format!("{other} and {c} both sequence {}", st.cert_bev));
                    }
                }
            }
            None
        }
        Property::PrefixOrder => {
            let mut prev = s.repl.initial.digest();
            for (i, (slot, p)) in s.repl.decisions.iter().enumerate() {
                let u = p.as_update()?;
                if *slot != i as Slot + 1 {
                    return Some(format!("decided slots have a gap before {slot}"));
                }
                if u.old != prev {
                    return Some(format!("update decided in slot {slot} does not extend slot {}", slot - 1));
                }
                prev = u.new.digest();
            }
            None
        }
        Property::Invariants => s.check_invariants().into_iter().next(),
    }
}

fn subsets_of_majority(all: &[ProcessId]) -> Vec<BTreeSet<ProcessId>> {
    let n = all.len();
    (0u32..1 << n)
        .filter(|m| 2 * m.count_ones() as usize > n)
        .map(|m| (0..n).filter(|i| m & (1 << i) != 0).map(|i| all[i]).collect())
        .collect()
}

/// Depth-first search over every interleaving within the bounds, stopping
/// at the first property violation or when the goal is reached.
///
/// Replicas only propose during the search. Learning and applying never
/// enable a certifier transition and only copy decisions, so they are
/// left out and the goal is judged on the decisions; a goal witness is
/// completed with the first replica learning and applying every slot.
pub fn explore(b: &ExploreBounds) -> ExploreReport {
    let certifiers: Vec<ProcessId> = (0..b.n as u32).map(ProcessId::certifier).collect();
    let replicas: Vec<ProcessId> = (0..b.replicas as u32).map(ProcessId::replica).collect();
    let rounds = (1..=b.max_round)
        .map(|k| {
            let id = k % b.n as u32;
            (RoundId::new(k, id), certifiers[id as usize])
        })
        .collect();
    let ex = Explorer {
        b,
        quorums: subsets_of_majority(&certifiers),
        certifiers,
        replicas,
        rounds,
    };
    let mut init = McState::new(b.mode, b.style, b.initial.clone(), &ex.certifiers, &ex.replicas, Some(ex.certifiers[0]));
    let mut prefix = Vec::new();
    for cmd in &b.commands {
        let ev = McEvent::Invoke {
            client: cmd.client,
            op: cmd.op.clone(),
        };
        init.apply(&ev).expect("fresh command");
        prefix.push(ev);
    }
    let mut report = ExploreReport {
        states: 0,
        transitions: 0,
        max_depth: 0,
        complete: true,
        violation: None,
        goal: None,
    };
    let mut visited: HashSet<u128> = HashSet::new();
    visited.insert(fingerprint(&init));
    let mut path: Vec<McEvent> = Vec::new();
    let mut stack: Vec<std::vec::IntoIter<(McEvent, McState)>> = Vec::new();
    let finish = |path: &[McEvent]| prefix.iter().chain(path).cloned().collect::<Vec<_>>();
    if let Some((property, reason)) = ex.check(&init) {
        report.violation = Some(Counterexample {
            property,
            reason,
            path: finish(&path),
        });
    } else {
        stack.push(ex.successors(&init).into_iter());
    }
    while let Some(frame) = stack.last_mut() {
        let Some((ev, next)) = frame.next() else {
            stack.pop();
            path.pop();
            continue;
        };
        report.transitions += 1;
        if !visited.insert(fingerprint(&next)) {
            continue;
        }
        if visited.len() >= b.state_cap {
            report.complete = false;
            break;
        }
        path.push(ev);
        report.max_depth = report.max_depth.max(path.len());
        if let Some((property, reason)) = ex.check(&next) {
            report.violation = Some(Counterexample {
                property,
                reason,
                path: finish(&path),
            });
            break;
        }
        if ex.reached(&next) {
            let mut witness = finish(&path);
            witness.extend(ex.apply_all(&next));
            report.goal = Some(witness);
            break;
        }
        stack.push(ex.successors(&next).into_iter());
    }
    report.states = visited.len();
    report
}

/// A path as a trace, one transition per tick.
pub fn path_to_trace(path: &[McEvent]) -> Vec<TraceEvent> {
    path.iter()
        .enumerate()
        .map(|(i, ev)| mc_trace_event(i as u64 + 1, i as u64, ev))
        .collect()
}
