//! Multi-consensus: certifiers certify payloads in rounds, a majority of
//! certifications in one round decides a slot, and recovery moves the
//! system to a higher round without losing decisions.
//!
//! The prefix-ordered variant additionally forces slots to be certified in
//! order and each update to build on the previous slot's state.

mod round;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::app::{AppState, Command, OpResult, Operation};
use crate::kernel::ProcessId;
use crate::specs::{blocked, Blocked, Payload, ReplEvent, ReplicationState, Slot, Style};

pub use round::{pi_compare, Progress, RoundConflict, RoundId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McMode {
    #[default]
    Plain,
    PrefixOrdered,
}

/// Per-certifier state. Slots without an entry hold ⟨floor, ⊥⟩.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CertifierState {
    pub cert_bev: RoundId,
    pub is_seq: bool,
    pub floor: RoundId,
    pub entries: BTreeMap<Slot, Progress>,
}

impl CertifierState {
    fn new(is_seq: bool) -> Self {
        Self {
            cert_bev: RoundId::ZERO,
            is_seq,
            floor: RoundId::ZERO,
            entries: BTreeMap::new(),
        }
    }

    pub fn progress(&self, slot: Slot) -> Progress {
        self.entries.get(&slot).cloned().unwrap_or(Progress::empty(self.floor))
    }

    /// Lowest slot holding ⟨round, ⊥⟩, if any.
    pub fn lowest_empty(&self, round: RoundId) -> Option<Slot> {
        let limit = self.entries.keys().next_back().copied().unwrap_or(0) + 1;
        (1..=limit).find(|&s| self.progress(s) == Progress::empty(round))
    }

    /// Round-stamp: the round of the held log and its length.
    pub fn stamp(&self) -> (RoundId, u64) {
        (self.floor, self.entries.len() as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Snapshot {
    pub certifier: ProcessId,
    pub round: RoundId,
    pub coord: ProcessId,
    pub floor: RoundId,
    pub entries: BTreeMap<Slot, Progress>,
}

impl Snapshot {
    pub fn progress(&self, slot: Slot) -> Progress {
        self.entries.get(&slot).cloned().unwrap_or(Progress::empty(self.floor))
    }

    pub fn stamp(&self) -> (RoundId, u64) {
        (self.floor, self.entries.len() as u64)
    }
}

/// The outcome of a recovery: who became sequencer of the round and the
/// payloads it holds.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Recovered {
    pub sequencer: ProcessId,
    pub coord: ProcessId,
    pub log: BTreeMap<Slot, Payload>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "transition")]
pub enum McEvent {
    Invoke {
        client: ProcessId,
        op: Operation,
    },
    Response {
        client: ProcessId,
        op: Operation,
        result: OpResult,
    },
    Propose {
        replica: ProcessId,
        slot: Slot,
        payload: Payload,
    },
    Update {
        replica: ProcessId,
        cmd: Command,
        result: OpResult,
        new_state: AppState,
    },
    ResetShadow {
        replica: ProcessId,
        version: Slot,
        state: AppState,
    },
    CertifySeq {
        certifier: ProcessId,
        slot: Slot,
        round: RoundId,
        payload: Payload,
    },
    Certify {
        certifier: ProcessId,
        slot: Slot,
        round: RoundId,
        payload: Payload,
    },
    ObserveDecision {
        replica: ProcessId,
        slot: Slot,
        payload: Payload,
    },
    SupportRound {
        certifier: ProcessId,
        round: RoundId,
        coord: ProcessId,
    },
    Recover {
        certifier: ProcessId,
        round: RoundId,
        coord: ProcessId,
        from: BTreeSet<ProcessId>,
        /// When present, the recovered log must equal this.
        #[serde(default, skip_serializing_if = "Option::is_none", deserialize_with = "slot_keyed")]
        log: Option<BTreeMap<Slot, Payload>>,
    },
    Adopt {
        certifier: ProcessId,
        round: RoundId,
    },
}

/// Slot-keyed maps arrive with string keys once buffered by the tagged
/// enum deserializer.
fn slot_keyed<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<BTreeMap<Slot, Payload>>, D::Error> {
    let Some(raw) = Option::<BTreeMap<String, Payload>>::deserialize(d)? else {
        return Ok(None);
    };
    raw.into_iter()
        .map(|(k, v)| k.parse::<Slot>().map(|k| (k, v)).map_err(serde::de::Error::custom))
        .collect::<Result<_, _>>()
        .map(Some)
}

impl McEvent {
    /// The replication-level event this is, for transitions inherited
    /// unchanged from replication.
    pub fn as_inherited(&self) -> Option<ReplEvent> {
        Some(match self.clone() {
            McEvent::Invoke { client, op } => ReplEvent::Invoke { client, op },
            McEvent::Response { client, op, result } => ReplEvent::Response { client, op, result },
            McEvent::Propose { replica, slot, payload } => ReplEvent::Propose { replica, slot, payload },
            McEvent::Update {
                replica,
                cmd,
                result,
                new_state,
            } => ReplEvent::Update {
                replica,
                cmd,
                result,
                new_state,
            },
            McEvent::ResetShadow { replica, version, state } => ReplEvent::ResetShadow { replica, version, state },
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            McEvent::Invoke { .. } => "invoke",
            McEvent::Response { .. } => "response",
            McEvent::Propose { .. } => "propose",
            McEvent::Update { .. } => "update",
            McEvent::ResetShadow { .. } => "reset_shadow",
            McEvent::CertifySeq { .. } => "certify_seq",
            McEvent::Certify { .. } => "certify",
            McEvent::ObserveDecision { .. } => "observe_decision",
            McEvent::SupportRound { .. } => "support_round",
            McEvent::Recover { .. } => "recover",
            McEvent::Adopt { .. } => "adopt",
        }
    }
}

/// Multi-consensus state. The replication variables are embedded; the
/// `decisions` field there caches what the certifications decide.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct McState {
    pub mode: McMode,
    pub n: usize,
    pub repl: ReplicationState,
    pub certifiers: BTreeMap<ProcessId, CertifierState>,
    pub certified: BTreeMap<(Slot, RoundId), BTreeMap<Payload, BTreeSet<ProcessId>>>,
    pub snapshots: BTreeMap<(ProcessId, RoundId), Snapshot>,
    pub recovered: BTreeMap<RoundId, Recovered>,
    pub violations: Vec<String>,
}

/// Slots newly decided by a transition.
pub type NewDecisions = Vec<(Slot, Payload)>;

impl McState {
    /// `initial_sequencer` starts as sequencer of round 0, as if it had
    /// recovered that round from empty snapshots.
    pub fn new(
        mode: McMode,
        style: Style,
        initial: AppState,
        certifiers: &[ProcessId],
        replicas: &[ProcessId],
        initial_sequencer: Option<ProcessId>,
    ) -> Self {
        let members: BTreeSet<ProcessId> = certifiers.iter().chain(replicas).copied().collect();
        let repl = ReplicationState::new(style, initial, members);
        let n = certifiers.len();
        let certifiers = certifiers
            .iter()
            .map(|&c| (c, CertifierState::new(Some(c) == initial_sequencer)))
            .collect();
        let mut recovered = BTreeMap::new();
        if let Some(s) = initial_sequencer {
            recovered.insert(
                RoundId::ZERO,
                Recovered {
                    sequencer: s,
                    coord: s,
                    log: BTreeMap::new(),
                },
            );
        }
        Self {
            mode,
            n,
            repl,
            certifiers,
            certified: BTreeMap::new(),
            snapshots: BTreeMap::new(),
            recovered,
            violations: Vec::new(),
        }
    }

    pub fn is_majority(&self, count: usize) -> bool {
        2 * count > self.n
    }

    pub fn certifier(&self, c: ProcessId) -> Option<&CertifierState> {
        self.certifiers.get(&c)
    }

    fn cert(&self, transition: &'static str, c: ProcessId) -> Result<&CertifierState, Blocked> {
        match self.certifiers.get(&c) {
            Some(s) => Ok(s),
            None => blocked(transition, format!("{c} is not a certifier")),
        }
    }

    /// Payloads certified by a majority in a single round, per slot.
    pub fn majority_decisions(&self) -> BTreeMap<Slot, BTreeSet<Payload>> {
        let mut out: BTreeMap<Slot, BTreeSet<Payload>> = BTreeMap::new();
        for ((slot, _), by_payload) in &self.certified {
            for (payload, who) in by_payload {
                if self.is_majority(who.len()) {
                    out.entry(*slot).or_default().insert(payload.clone());
                }
            }
        }
        out
    }

    fn has_majority(&self, slot: Slot, payload: &Payload) -> bool {
        self.certified
            .range((slot, RoundId::ZERO)..=(slot, RoundId::new(u32::MAX, u32::MAX)))
            .any(|(_, by)| by.get(payload).is_some_and(|who| self.is_majority(who.len())))
    }

    fn add_certification(&mut self, c: ProcessId, slot: Slot, round: RoundId, payload: &Payload, out: &mut NewDecisions) {
        let rivals = self
            .certified
            .get(&(slot, round))
            .is_some_and(|by| by.keys().any(|p| p != payload));
        if rivals {
            self.violations
                .push(format!("slot {slot} has two payloads certified in round {round}"));
        }
        let was = self.has_majority(slot, payload);
        self.certified
            .entry((slot, round))
            .or_default()
            .entry(payload.clone())
            .or_default()
            .insert(c);
        if !was && self.has_majority(slot, payload) {
            match self.repl.decisions.get(&slot) {
                Some(d) if d != payload => {
                    self.violations
                        .push(format!("slot {slot} decided twice: {d} and {payload}"));
                }
                Some(_) => {}
                None => {
                    self.repl.decisions.insert(slot, payload.clone());
                    out.push((slot, payload.clone()));
                }
            }
        }
    }

    pub fn certify_seq(&mut self, c: ProcessId, slot: Slot, round: RoundId, payload: &Payload) -> Result<NewDecisions, Blocked> {
        const T: &str = "certify_seq";
        let st = self.cert(T, c)?;
        if !st.is_seq {
            return blocked(T, format!("{c} is not a sequencer"));
        }
        if st.cert_bev != round {
            return blocked(T, format!("{c} supports {} not {round}", st.cert_bev));
        }
        if st.lowest_empty(round) != Some(slot) {
            return blocked(T, format!("slot {slot} is not the lowest empty slot of {c}"));
        }
        if !self
            .repl
            .replicas
            .values()
            .any(|r| r.proposals.get(&slot).is_some_and(|p| p.contains(payload)))
        {
            return blocked(T, format!("{payload} not proposed for slot {slot}"));
        }
        if self.mode == McMode::PrefixOrdered && slot > 1 {
            let prev = st.progress(slot - 1);
            let base = prev.payload.as_ref().and_then(Payload::as_update).map(|u| u.new.digest());
            match (base, payload.as_update()) {
                (Some(d), Some(u)) if d == u.old => {}
                _ => return blocked(T, format!("update does not build on slot {}", slot - 1)),
            }
        }
        let mut out = Vec::new();
        self.certifiers
            .get_mut(&c)
            .unwrap()
            .entries
            .insert(slot, Progress::of(round, payload.clone()));
        self.add_certification(c, slot, round, payload, &mut out);
        Ok(out)
    }

    pub fn certify(&mut self, c: ProcessId, slot: Slot, round: RoundId, payload: &Payload) -> Result<NewDecisions, Blocked> {
        const T: &str = "certify";
        let st = self.cert(T, c)?;
        if !self.certified.get(&(slot, round)).is_some_and(|by| by.contains_key(payload)) {
            return blocked(T, format!("no certification of {payload} in slot {slot} round {round}"));
        }
        if st.cert_bev != round {
            return blocked(T, format!("{c} supports {} not {round}", st.cert_bev));
        }
        let pi = Progress::of(round, payload.clone());
        if !pi.succeeds(&st.progress(slot)) {
            return blocked(T, format!("{pi} does not succeed {}", st.progress(slot)));
        }
        if self.mode == McMode::PrefixOrdered {
            if st.floor != round {
                return blocked(T, format!("{c} has not installed round {round}"));
            }
            if slot > 1 && st.progress(slot - 1).payload.is_none() {
                return blocked(T, format!("slot {} not certified", slot - 1));
            }
        }
        let mut out = Vec::new();
        self.certifiers.get_mut(&c).unwrap().entries.insert(slot, pi);
        self.add_certification(c, slot, round, payload, &mut out);
        Ok(out)
    }

    pub fn observe_decision(&mut self, r: ProcessId, slot: Slot, payload: &Payload) -> Result<(), Blocked> {
        const T: &str = "observe_decision";
        if !self.has_majority(slot, payload) {
            return blocked(T, format!("{payload} lacks a same-round majority in slot {slot}"));
        }
        let Some(rv) = self.repl.replicas.get_mut(&r) else {
            return blocked(T, format!("{r} is not a replica"));
        };
        if rv.learned.contains_key(&slot) {
            return blocked(T, format!("{r} already learned slot {slot}"));
        }
        rv.learned.insert(slot, payload.clone());
        Ok(())
    }

    pub fn support_round(&mut self, c: ProcessId, round: RoundId, coord: ProcessId) -> Result<(), Blocked> {
        const T: &str = "support_round";
        let st = self.cert(T, c)?;
        if round <= st.cert_bev {
            return blocked(T, format!("{round} is not above {}", st.cert_bev));
        }
        let snap = Snapshot {
            certifier: c,
            round,
            coord,
            floor: st.floor,
            entries: st.entries.clone(),
        };
        self.snapshots.insert((c, round), snap);
        let st = self.certifiers.get_mut(&c).unwrap();
        st.cert_bev = round;
        st.is_seq = false;
        Ok(())
    }

    /// The log a recovery from `from` would install.
    pub fn recovered_log(&self, round: RoundId, coord: ProcessId, from: &BTreeSet<ProcessId>) -> Result<BTreeMap<Slot, Payload>, Blocked> {
        const T: &str = "recover";
        if !self.is_majority(from.len()) {
            return blocked(T, format!("{} snapshots are not a majority", from.len()));
        }
        let mut snaps = Vec::new();
        for c in from {
            match self.snapshots.get(&(*c, round)) {
                Some(s) if s.coord == coord => snaps.push(s),
                Some(_) => return blocked(T, format!("snapshot of {c} names another coordinator")),
                None => return blocked(T, format!("no snapshot of {c} for round {round}")),
            }
        }
        recovery_log(self.mode, &snaps).map_err(|e| Blocked {
            transition: T,
            reason: e.to_string(),
        })
    }

    pub fn recover(
        &mut self,
        c: ProcessId,
        round: RoundId,
        coord: ProcessId,
        from: &BTreeSet<ProcessId>,
        expect: Option<&BTreeMap<Slot, Payload>>,
    ) -> Result<NewDecisions, Blocked> {
        const T: &str = "recover";
        let st = self.cert(T, c)?;
        if st.cert_bev != round {
            return blocked(T, format!("{c} supports {} not {round}", st.cert_bev));
        }
        if st.is_seq {
            return blocked(T, format!("{c} is already sequencer"));
        }
        if self.recovered.contains_key(&round) {
            return blocked(T, format!("round {round} already recovered"));
        }
        let log = self.recovered_log(round, coord, from)?;
        if expect.is_some_and(|e| e != &log) {
            return blocked(T, "recovered log differs from the reported one");
        }
        let mut out = Vec::new();
        let st = self.certifiers.get_mut(&c).unwrap();
        st.floor = round;
        st.is_seq = true;
        st.entries = log.iter().map(|(s, p)| (*s, Progress::of(round, p.clone()))).collect();
        for (s, p) in &log {
            self.add_certification(c, *s, round, p, &mut out);
        }
        self.recovered.insert(
            round,
            Recovered {
                sequencer: c,
                coord,
                log,
            },
        );
        Ok(out)
    }

    /// A follower installs the log its round's sequencer recovered and
    /// certifies every slot of it, dropping anything beyond.
    pub fn adopt(&mut self, c: ProcessId, round: RoundId) -> Result<NewDecisions, Blocked> {
        const T: &str = "adopt";
        if self.mode != McMode::PrefixOrdered {
            return blocked(T, "only defined in prefix-ordered mode");
        }
        let st = self.cert(T, c)?;
        if st.cert_bev != round {
            return blocked(T, format!("{c} supports {} not {round}", st.cert_bev));
        }
        if st.floor >= round {
            return blocked(T, format!("{c} already holds round {round}"));
        }
        let Some(rec) = self.recovered.get(&round) else {
            return blocked(T, format!("round {round} not recovered"));
        };
        if rec.sequencer == c {
            return blocked(T, format!("{c} is the sequencer of round {round}"));
        }
        let log = rec.log.clone();
        let mut out = Vec::new();
        let st = self.certifiers.get_mut(&c).unwrap();
        st.floor = round;
        st.entries = log.iter().map(|(s, p)| (*s, Progress::of(round, p.clone()))).collect();
        for (s, p) in &log {
            self.add_certification(c, *s, round, p, &mut out);
        }
        Ok(out)
    }

    pub fn apply(&mut self, ev: &McEvent) -> Result<NewDecisions, Blocked> {
        if let Some(inherited) = ev.as_inherited() {
            return self.repl.apply(&inherited).map(|_| Vec::new());
        }
        match ev {
            McEvent::CertifySeq {
                certifier,
                slot,
                round,
                payload,
            } => self.certify_seq(*certifier, *slot, *round, payload),
            McEvent::Certify {
                certifier,
                slot,
                round,
                payload,
            } => self.certify(*certifier, *slot, *round, payload),
            McEvent::ObserveDecision { replica, slot, payload } => {
                self.observe_decision(*replica, *slot, payload).map(|_| Vec::new())
            }
            McEvent::SupportRound { certifier, round, coord } => {
                self.support_round(*certifier, *round, *coord).map(|_| Vec::new())
            }
            McEvent::Recover {
                certifier,
                round,
                coord,
                from,
                log,
            } => self.recover(*certifier, *round, *coord, from, log.as_ref()),
            McEvent::Adopt { certifier, round } => self.adopt(*certifier, *round),
            _ => unreachable!("inherited events handled above"),
        }
    }

    /// Safety properties over the current state.
    pub fn check_invariants(&self) -> Vec<String> {
        let mut out = self.violations.clone();
        for (slot, ps) in self.majority_decisions() {
            if ps.len() > 1 {
                out.push(format!("slot {slot} has {} decided payloads", ps.len()));
            }
        }
        let mut seq_rounds = BTreeMap::new();
        for (c, st) in &self.certifiers {
            if st.is_seq {
                if let Some(other) = seq_rounds.insert(st.cert_bev, *c) {
                    out.push(format!("{other} and {c} are both sequencer of {}", st.cert_bev));
                }
            }
        }
        if self.mode == McMode::PrefixOrdered {
            let mut prev: Option<&AppState> = None;
            for (i, (slot, p)) in self.repl.decisions.iter().enumerate() {
                if *slot != i as Slot + 1 {
                    out.push(format!("decided slots have a gap before {slot}"));
                    break;
                }
                if let (Some(prev), Some(u)) = (prev, p.as_update()) {
                    if prev.digest() != u.old {
                        out.push(format!("decided update in slot {slot} does not chain"));
                    }
                }
                prev = p.as_update().map(|u| &u.new);
            }
        }
        if let Err(e) = self.repl.check_invariants() {
            if self.mode == McMode::PrefixOrdered || self.repl.style == Style::Active {
                out.push(e);
            }
        }
        out
    }
}


/// The log recovered from a majority of snapshots: per slot the highest
/// progress indicator, or in prefix-ordered mode the log of the snapshot
/// with the highest round-stamp.
pub fn recovery_log(mode: McMode, snaps: &[&Snapshot]) -> Result<BTreeMap<Slot, Payload>, RoundConflict> {
    let mut log = BTreeMap::new();
    let Some(first) = snaps.first() else {
        return Ok(log);
    };
    match mode {
        McMode::Plain => {
            let slots: BTreeSet<Slot> = snaps.iter().flat_map(|s| s.entries.keys().copied()).collect();
            for slot in slots {
                let mut best = first.progress(slot);
                for s in &snaps[1..] {
                    let p = s.progress(slot);
                    if pi_compare(&p, &best)? == std::cmp::Ordering::Greater {
                        best = p;
                    }
                }
                if let Some(p) = best.payload {
                    log.insert(slot, p);
                }
            }
        }
        McMode::PrefixOrdered => {
            let best = snaps.iter().max_by_key(|s| s.stamp()).expect("non-empty");
            for (slot, p) in &best.entries {
                log.insert(*slot, p.payload.clone().expect("entries hold payloads"));
            }
        }
    }
    Ok(log)
}
