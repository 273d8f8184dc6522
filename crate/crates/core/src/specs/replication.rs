use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{blocked, Blocked, Payload, Slot};
use crate::app::{next_state, AppState, Command, OpResult, Operation, StateUpdate};
use crate::kernel::ProcessId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    /// Replicas order client commands and execute each one.
    Active,
    /// A primary executes and replicas order the resulting state updates.
    Passive,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "transition")]
pub enum ReplEvent {
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
    Decide {
        slot: Slot,
        payload: Payload,
    },
    Learn {
        replica: ProcessId,
        slot: Slot,
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
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReplicaVars {
    pub proposals: BTreeMap<Slot, BTreeSet<Payload>>,
    pub learned: BTreeMap<Slot, Payload>,
    pub state: AppState,
    /// Next slot to apply.
    pub version: Slot,
    pub shadow: AppState,
    pub shadow_version: Slot,
}

impl ReplicaVars {
    fn new(init: &AppState) -> Self {
        Self {
            proposals: BTreeMap::new(),
            learned: BTreeMap::new(),
            state: init.clone(),
            version: 1,
            shadow: init.clone(),
            shadow_version: 1,
        }
    }
}

/// Active or passive replication over a fixed set of replicas. The passive
/// variant adds the shadow state used by primaries to compute updates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReplicationState {
    pub style: Style,
    pub initial: AppState,
    pub inputs: BTreeSet<Command>,
    pub outputs: BTreeSet<(Command, OpResult)>,
    pub invoked: BTreeMap<ProcessId, BTreeSet<Operation>>,
    pub received: BTreeMap<ProcessId, BTreeSet<Operation>>,
    pub decisions: BTreeMap<Slot, Payload>,
    pub replicas: BTreeMap<ProcessId, ReplicaVars>,
}

impl ReplicationState {
    pub fn new(style: Style, initial: AppState, replicas: impl IntoIterator<Item = ProcessId>) -> Self {
        let replicas = replicas
            .into_iter()
            .map(|r| (r, ReplicaVars::new(&initial)))
            .collect();
        Self {
            style,
            initial,
            inputs: BTreeSet::new(),
            outputs: BTreeSet::new(),
            invoked: BTreeMap::new(),
            received: BTreeMap::new(),
            decisions: BTreeMap::new(),
            replicas,
        }
    }

    pub fn replica(&self, r: ProcessId) -> Option<&ReplicaVars> {
        self.replicas.get(&r)
    }

    fn replica_mut(&mut self, transition: &'static str, r: ProcessId) -> Result<&mut ReplicaVars, Blocked> {
        match self.replicas.get_mut(&r) {
            Some(v) => Ok(v),
            None => blocked(transition, format!("{r} is not a replica")),
        }
    }

    pub fn invoke(&mut self, client: ProcessId, op: &Operation) -> Result<(), Blocked> {
        if self.invoked.get(&client).is_some_and(|s| s.contains(op)) {
            return blocked("invoke", format!("{client} already invoked op {}", op.id.0));
        }
        self.invoked.entry(client).or_default().insert(op.clone());
        self.inputs.insert(Command::new(client, op.clone()));
        Ok(())
    }

    pub fn response(&mut self, client: ProcessId, op: &Operation, result: &OpResult) -> Result<(), Blocked> {
        let cmd = Command::new(client, op.clone());
        if !self.outputs.contains(&(cmd, result.clone())) {
            return blocked("response", format!("no output for op {} of {client}", op.id.0));
        }
        if self.received.get(&client).is_some_and(|s| s.contains(op)) {
            return blocked("response", format!("op {} already received", op.id.0));
        }
        self.received.entry(client).or_default().insert(op.clone());
        Ok(())
    }

    pub fn propose(&mut self, replica: ProcessId, slot: Slot, payload: &Payload) -> Result<(), Blocked> {
        if !self.inputs.contains(payload.command()) {
            return blocked("propose", "command was not invoked");
        }
        let style = self.style;
        let r = self.replica_mut("propose", replica)?;
        if r.learned.contains_key(&slot) {
            return blocked("propose", format!("{replica} already learned slot {slot}"));
        }
        match (style, payload) {
            (Style::Active, Payload::Command(_)) => {}
            (Style::Passive, Payload::Update(u)) => {
                if slot != r.shadow_version {
                    return blocked(
                        "propose",
                        format!("slot {slot} is not the shadow version {}", r.shadow_version),
                    );
                }
                if !u.is_consistent_with(&r.shadow) {
                    return blocked("propose", "update was not computed on the shadow state");
                }
                r.shadow = u.new.clone();
                r.shadow_version = slot + 1;
            }
            _ => return blocked("propose", "payload kind does not match replication style"),
        }
        r.proposals.entry(slot).or_default().insert(payload.clone());
        Ok(())
    }

    pub fn decide(&mut self, slot: Slot, payload: &Payload) -> Result<(), Blocked> {
        if slot == 0 {
            return blocked("decide", "slots start at 1");
        }
        if self.decisions.contains_key(&slot) {
            return blocked("decide", format!("slot {slot} already decided"));
        }
        if !self
            .replicas
            .values()
            .any(|r| r.proposals.get(&slot).is_some_and(|p| p.contains(payload)))
        {
            return blocked("decide", format!("{payload} was not proposed for slot {slot}"));
        }
        if let (Style::Passive, Payload::Update(u)) = (self.style, payload) {
            if slot > 1 {
                match self.decisions.get(&(slot - 1)).and_then(Payload::as_update) {
                    Some(prev) if prev.new.digest() == u.old => {}
                    Some(_) => return blocked("decide", format!("update does not extend slot {}", slot - 1)),
                    None => return blocked("decide", format!("slot {} undecided", slot - 1)),
                }
            }
        }
        self.decisions.insert(slot, payload.clone());
        Ok(())
    }

    pub fn learn(&mut self, replica: ProcessId, slot: Slot) -> Result<(), Blocked> {
        let Some(d) = self.decisions.get(&slot).cloned() else {
            return blocked("learn", format!("slot {slot} undecided"));
        };
        let r = self.replica_mut("learn", replica)?;
        if r.learned.contains_key(&slot) {
            return blocked("learn", format!("{replica} already learned slot {slot}"));
        }
        r.learned.insert(slot, d);
        Ok(())
    }

    pub fn update(
        &mut self,
        replica: ProcessId,
        cmd: &Command,
        result: &OpResult,
        new_state: &AppState,
    ) -> Result<(), Blocked> {
        let style = self.style;
        let r = self.replica_mut("update", replica)?;
        let Some(learned) = r.learned.get(&r.version) else {
            return blocked("update", format!("{replica} has not learned slot {}", r.version));
        };
        let ok = match (style, learned) {
            (Style::Active, Payload::Command(c)) => {
                c == cmd && next_state(&r.state, c) == (result.clone(), new_state.clone())
            }
            (Style::Passive, Payload::Update(u)) => &u.cmd == cmd && &u.result == result && &u.new == new_state,
            _ => false,
        };
        if !ok {
            return blocked("update", format!("does not match learned slot {}", r.version));
        }
        r.state = new_state.clone();
        r.version += 1;
        self.outputs.insert((cmd.clone(), result.clone()));
        Ok(())
    }

    pub fn reset_shadow(&mut self, replica: ProcessId, version: Slot, state: &AppState) -> Result<(), Blocked> {
        if self.style != Style::Passive {
            return blocked("reset_shadow", "only defined for passive replication");
        }
        let r = self.replica_mut("reset_shadow", replica)?;
        if version < r.version {
            return blocked("reset_shadow", format!("version {version} behind {}", r.version));
        }
        if version == r.version && state != &r.state {
            return blocked("reset_shadow", "state differs from the replica state at equal version");
        }
        r.shadow = state.clone();
        r.shadow_version = version;
        Ok(())
    }

    pub fn apply(&mut self, ev: &ReplEvent) -> Result<(), Blocked> {
        match ev {
            ReplEvent::Invoke { client, op } => self.invoke(*client, op),
            ReplEvent::Response { client, op, result } => self.response(*client, op, result),
            ReplEvent::Propose { replica, slot, payload } => self.propose(*replica, *slot, payload),
            ReplEvent::Decide { slot, payload } => self.decide(*slot, payload),
            ReplEvent::Learn { replica, slot } => self.learn(*replica, *slot),
            ReplEvent::Update {
                replica,
                cmd,
                result,
                new_state,
            } => self.update(*replica, cmd, result, new_state),
            ReplEvent::ResetShadow { replica, version, state } => self.reset_shadow(*replica, *version, state),
        }
    }

    /// Checks the safety invariants: learned values agree with decisions,
    /// decisions were proposed, each replica state is the fold of its
    /// learned prefix, and (passive) decided updates chain.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (slot, d) in &self.decisions {
            if !self
                .replicas
                .values()
                .any(|r| r.proposals.get(slot).is_some_and(|p| p.contains(d)))
            {
                return Err(format!("decision at slot {slot} was never proposed"));
            }
            if let (Style::Passive, Some(u)) = (self.style, d.as_update()) {
                let base = match slot {
                    1 => None,
                    s => self.decisions.get(&(s - 1)).and_then(Payload::as_update),
                };
                if let Some(prev) = base {
                    if prev.new.digest() != u.old {
                        return Err(format!("decided update at slot {slot} breaks prefix order"));
                    }
                }
            }
        }
        for (id, r) in &self.replicas {
            for (slot, l) in &r.learned {
                if self.decisions.get(slot) != Some(l) {
                    return Err(format!("{id} learned a value at slot {slot} that was not decided"));
                }
            }
            let mut state = self.initial.clone();
            for slot in 1..r.version {
                let Some(p) = r.learned.get(&slot) else {
                    return Err(format!("{id} applied slot {slot} without learning it"));
                };
                state = match p {
                    Payload::Command(c) => next_state(&state, c).1,
                    Payload::Update(u) => u.new.clone(),
                };
            }
            if state != r.state {
                return Err(format!("{id} state diverges from its learned prefix"));
            }
        }
        Ok(())
    }

    /// Transitions enabled for the given candidate operations. Proposals are
    /// made only for the lowest slot the replica has neither proposed for
    /// nor learned, which keeps the enumeration finite.
    pub fn enabled(&self, ops: &[(ProcessId, Operation)], max_slot: Slot) -> Vec<ReplEvent> {
        let mut out = Vec::new();
        for (client, op) in ops {
            if !self.invoked.get(client).is_some_and(|s| s.contains(op)) {
                out.push(ReplEvent::Invoke {
                    client: *client,
                    op: op.clone(),
                });
            }
        }
        for (cmd, result) in &self.outputs {
            if !self.received.get(&cmd.client).is_some_and(|s| s.contains(&cmd.op)) {
                out.push(ReplEvent::Response {
                    client: cmd.client,
                    op: cmd.op.clone(),
                    result: result.clone(),
                });
            }
        }
        for (&id, r) in &self.replicas {
            let slot = match self.style {
                Style::Active => (1..=max_slot).find(|s| !r.proposals.contains_key(s) && !r.learned.contains_key(s)),
                Style::Passive => Some(r.shadow_version).filter(|&s| s <= max_slot && !r.learned.contains_key(&s)),
            };
            if let Some(slot) = slot {
                for cmd in &self.inputs {
                    let payload = match self.style {
                        Style::Active => Payload::Command(cmd.clone()),
                        Style::Passive => Payload::Update(StateUpdate::compute(&r.shadow, cmd)),
                    };
                    out.push(ReplEvent::Propose {
                        replica: id,
                        slot,
                        payload,
                    });
                }
            }
            for (slot, props) in &r.proposals {
                if self.decisions.contains_key(slot) {
                    continue;
                }
                for p in props {
                    let ev = ReplEvent::Decide {
                        slot: *slot,
                        payload: p.clone(),
                    };
                    if self.clone().apply(&ev).is_ok() && !out.contains(&ev) {
                        out.push(ev);
                    }
                }
            }
            for slot in self.decisions.keys() {
                if !r.learned.contains_key(slot) {
                    out.push(ReplEvent::Learn { replica: id, slot: *slot });
                }
            }
            if let Some(p) = r.learned.get(&r.version) {
                let (cmd, result, new_state) = match p {
                    Payload::Command(c) => {
                        let (res, next) = next_state(&r.state, c);
                        (c.clone(), res, next)
                    }
                    Payload::Update(u) => (u.cmd.clone(), u.result.clone(), u.new.clone()),
                };
                out.push(ReplEvent::Update {
                    replica: id,
                    cmd,
                    result,
                    new_state,
                });
            }
            if self.style == Style::Passive && r.shadow_version != r.version {
                out.push(ReplEvent::ResetShadow {
                    replica: id,
                    version: r.version,
                    state: r.state.clone(),
                });
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::app::{AppConfig, OpKind};
    use std::collections::{HashSet, VecDeque};

    fn r(i: u32) -> ProcessId {
        ProcessId::replica(i)
    }

    fn op(id: u64, kind: OpKind) -> (ProcessId, Operation) {
        (ProcessId::client(id as u32), Operation::new(id, kind))
    }

    fn cmd(o: &(ProcessId, Operation)) -> Command {
        Command::new(o.0, o.1.clone())
    }

    fn active() -> ReplicationState {
        ReplicationState::new(Style::Active, AppConfig::Register { init: 3 }.initial_state(), [r(0), r(1)])
    }

    fn passive() -> ReplicationState {
        ReplicationState::new(Style::Passive, AppConfig::Register { init: 3 }.initial_state(), [r(0), r(1)])
    }

    #[test]
    fn decide_requires_a_proposal() {
        let mut s = active();
        let a = op(0, OpKind::Inc);
        s.invoke(a.0, &a.1).unwrap();
        let p = Payload::Command(cmd(&a));
        assert!(s.decide(1, &p).is_err());
        s.propose(r(0), 1, &p).unwrap();
        s.decide(1, &p).unwrap();
        assert!(s.decide(1, &p).is_err());
    }

    #[test]
    fn update_requires_learned_slot() {
        let mut s = active();
        let a = op(0, OpKind::Inc);
        s.invoke(a.0, &a.1).unwrap();
        let c = cmd(&a);
        let p = Payload::Command(c.clone());
        s.propose(r(0), 1, &p).unwrap();
        s.decide(1, &p).unwrap();
        let four = AppState::Register { value: 4 };
        assert!(s.update(r(1), &c, &OpResult::Value { value: 4 }, &four).is_err());
        s.learn(r(1), 1).unwrap();
        s.update(r(1), &c, &OpResult::Value { value: 4 }, &four).unwrap();
        assert_eq!(s.replica(r(1)).unwrap().version, 2);
        s.response(a.0, &a.1, &OpResult::Value { value: 4 }).unwrap();
        s.check_invariants().unwrap();
    }

    fn explore(mut init: ReplicationState, ops: &[(ProcessId, Operation)], max_slot: Slot) -> Vec<ReplicationState> {
        for (c, o) in ops {
            init.invoke(*c, o).unwrap();
        }
        let mut seen = HashSet::new();
        let mut queue = VecDeque::from([init.clone()]);
        seen.insert(init);
        let mut all = Vec::new();
        while let Some(s) = queue.pop_front() {
            assert!(seen.len() < 2_000_000, "state space larger than expected");
            for ev in s.enabled(ops, max_slot) {
                if matches!(ev, ReplEvent::Response { .. } | ReplEvent::ResetShadow { .. }) {
                    continue;
                }
                let mut n = s.clone();
                n.apply(&ev).unwrap();
                if seen.insert(n.clone()) {
                    queue.push_back(n);
                }
            }
            all.push(s);
        }
        all
    }

    #[test]
    fn only_the_decided_command_is_ever_learned() {
        let ops = [op(0, OpKind::Inc), op(1, OpKind::Double)];
        let states = explore(active(), &ops, 1);
        assert!(states.len() > 50);
        let mut both_proposed = false;
        for s in &states {
            s.check_invariants().unwrap();
            let proposed: BTreeSet<_> = s.replicas.values().flat_map(|r| r.proposals.get(&1)).flatten().collect();
            both_proposed |= proposed.len() == 2;
            for rv in s.replicas.values() {
                if let Some(l) = rv.learned.get(&1) {
                    assert_eq!(Some(l), s.decisions.get(&1));
                }
            }
            let states: BTreeSet<_> = s.replicas.values().filter(|r| r.version == 2).map(|r| &r.state).collect();
            assert!(states.len() <= 1);
        }
        assert!(both_proposed);
    }

    #[test]
    fn passive_exploration_preserves_prefix_order() {
        let ops = [op(0, OpKind::Inc), op(1, OpKind::Double)];
        for s in explore(passive(), &ops, 2) {
            s.check_invariants().unwrap();
            for rv in s.replicas.values() {
                if rv.version == 3 {
                    let first = rv.learned[&1].as_update().unwrap().new.register_value();
                    let last = rv.state.register_value();
                    assert!(!(first == Some(4) && last == Some(7)), "4 then 7 reached");
                }
            }
        }
    }

    #[test]
    fn decide_rejects_update_on_wrong_base() {
        let mut s = passive();
        let a = op(0, OpKind::Inc);
        let b = op(1, OpKind::Double);
        s.invoke(a.0, &a.1).unwrap();
        s.invoke(b.0, &b.1).unwrap();
        let three = AppState::Register { value: 3 };
        // r0 proposes inc on 3, r1 proposes double on 3 and then inc on 6
        let inc3 = Payload::Update(StateUpdate::compute(&three, &cmd(&a)));
        let dbl3 = Payload::Update(StateUpdate::compute(&three, &cmd(&b)));
        s.propose(r(0), 1, &inc3).unwrap();
        s.propose(r(1), 1, &dbl3).unwrap();
        let six = AppState::Register { value: 6 };
        let inc6 = Payload::Update(StateUpdate::compute(&six, &cmd(&a)));
        s.propose(r(1), 2, &inc6).unwrap();
        s.decide(1, &inc3).unwrap();
        let err = s.decide(2, &inc6).unwrap_err();
        assert_eq!(err.transition, "decide");
    }

    #[test]
    fn propose_must_use_shadow_state() {
        let mut s = passive();
        let a = op(0, OpKind::Inc);
        s.invoke(a.0, &a.1).unwrap();
        let wrong = Payload::Update(StateUpdate::compute(&AppState::Register { value: 6 }, &cmd(&a)));
        assert!(s.propose(r(0), 1, &wrong).is_err());
        let ok = Payload::Update(StateUpdate::compute(&AppState::Register { value: 3 }, &cmd(&a)));
        assert!(s.propose(r(0), 2, &ok).is_err());
        s.propose(r(0), 1, &ok).unwrap();
        assert_eq!(s.replica(r(0)).unwrap().shadow_version, 2);
    }

    #[test]
    fn reset_shadow_equality_branch() {
        let mut s = passive();
        let three = AppState::Register { value: 3 };
        let nine = AppState::Register { value: 9 };
        assert!(s.reset_shadow(r(0), 1, &nine).is_err());
        s.reset_shadow(r(0), 1, &three).unwrap();
        // ahead of the applied version any state is allowed
        s.reset_shadow(r(0), 2, &nine).unwrap();
        assert_eq!(s.replica(r(0)).unwrap().shadow, nine);
        assert!(active().reset_shadow(r(0), 1, &three).is_err());
    }
}
