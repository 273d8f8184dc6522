use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{blocked, Blocked};
use crate::app::{next_state, AppState, Command, OpResult, Operation};
use crate::kernel::ProcessId;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "transition")]
pub enum ServiceEvent {
    Invoke {
        client: ProcessId,
        op: Operation,
    },
    Execute {
        client: ProcessId,
        op: Operation,
        result: OpResult,
        new_state: AppState,
    },
    Response {
        client: ProcessId,
        op: Operation,
        result: OpResult,
    },
}

/// The linearizable service: clients invoke, the service executes against
/// an internal state, clients receive responses.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ServiceState {
    pub inputs: BTreeSet<Command>,
    pub outputs: BTreeSet<(Command, OpResult)>,
    pub state: AppState,
    pub invoked: BTreeMap<ProcessId, BTreeSet<Operation>>,
    pub received: BTreeMap<ProcessId, BTreeSet<Operation>>,
}

impl ServiceState {
    pub fn new(initial: AppState) -> Self {
        Self {
            inputs: BTreeSet::new(),
            outputs: BTreeSet::new(),
            state: initial,
            invoked: BTreeMap::new(),
            received: BTreeMap::new(),
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

    pub fn execute(
        &mut self,
        client: ProcessId,
        op: &Operation,
        result: &OpResult,
        new_state: &AppState,
    ) -> Result<(), Blocked> {
        let cmd = Command::new(client, op.clone());
        if !self.inputs.contains(&cmd) {
            return blocked("execute", format!("op {} of {client} not in inputs", op.id.0));
        }
        let (res, next) = next_state(&self.state, &cmd);
        if &res != result || &next != new_state {
            return blocked("execute", "result/new state differ from nextState(state, cmd)");
        }
        self.state = next;
        self.outputs.insert((cmd, res));
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

    pub fn apply(&mut self, ev: &ServiceEvent) -> Result<(), Blocked> {
        match ev {
            ServiceEvent::Invoke { client, op } => self.invoke(*client, op),
            ServiceEvent::Execute {
                client,
                op,
                result,
                new_state,
            } => self.execute(*client, op, result, new_state),
            ServiceEvent::Response { client, op, result } => self.response(*client, op, result),
        }
    }

    /// Every output's command was input.
    pub fn outputs_follow_inputs(&self) -> bool {
        self.outputs.iter().all(|(c, _)| self.inputs.contains(c))
    }

    /// Transitions enabled for the given candidate operations.
    pub fn enabled(&self, ops: &[(ProcessId, Operation)]) -> Vec<ServiceEvent> {
        let mut out = Vec::new();
        for (client, op) in ops {
            if !self.invoked.get(client).is_some_and(|s| s.contains(op)) {
                out.push(ServiceEvent::Invoke {
                    client: *client,
                    op: op.clone(),
                });
            }
        }
        for cmd in &self.inputs {
            let (result, new_state) = next_state(&self.state, cmd);
            out.push(ServiceEvent::Execute {
                client: cmd.client,
                op: cmd.op.clone(),
                result,
                new_state,
            });
        }
        for (cmd, result) in &self.outputs {
            if !self.received.get(&cmd.client).is_some_and(|s| s.contains(&cmd.op)) {
                out.push(ServiceEvent::Response {
                    client: cmd.client,
                    op: cmd.op.clone(),
                    result: result.clone(),
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

    fn setup() -> (ServiceState, ProcessId, Operation) {
        let s = ServiceState::new(AppConfig::Register { init: 3 }.initial_state());
        (s, ProcessId::client(0), Operation::new(1, OpKind::Inc))
    }

    #[test]
    fn invoke_twice_is_blocked() {
        let (mut s, c, op) = setup();
        s.invoke(c, &op).unwrap();
        assert!(s.invoke(c, &op).is_err());
    }

    #[test]
    fn execute_before_invoke_is_blocked() {
        let (mut s, c, op) = setup();
        let err = s
            .execute(c, &op, &OpResult::Value { value: 4 }, &AppState::Register { value: 4 })
            .unwrap_err();
        assert_eq!(err.transition, "execute");
    }

    #[test]
    fn re_execution_is_permitted() {
        let (mut s, c, op) = setup();
        s.invoke(c, &op).unwrap();
        s.execute(c, &op, &OpResult::Value { value: 4 }, &AppState::Register { value: 4 })
            .unwrap();
        s.execute(c, &op, &OpResult::Value { value: 5 }, &AppState::Register { value: 5 })
            .unwrap();
        assert_eq!(s.outputs.len(), 2);
        s.response(c, &op, &OpResult::Value { value: 5 }).unwrap();
        // only one response per op
        assert!(s.response(c, &op, &OpResult::Value { value: 4 }).is_err());
        assert!(s.outputs_follow_inputs());
    }

    #[test]
    fn execute_must_match_next_state() {
        let (mut s, c, op) = setup();
        s.invoke(c, &op).unwrap();
        assert!(s
            .execute(c, &op, &OpResult::Value { value: 6 }, &AppState::Register { value: 6 })
            .is_err());
        assert_eq!(s.state, AppState::Register { value: 3 });
    }

    #[test]
    fn enabled_list_is_applicable() {
        let (mut s, c, op) = setup();
        let ops = vec![(c, op)];
        for _ in 0..4 {
            let en = s.enabled(&ops);
            for ev in &en {
                s.clone().apply(ev).unwrap();
            }
            if let Some(ev) = en.first() {
                s.apply(ev).unwrap();
            }
        }
    }
}
