use std::collections::VecDeque;

use serde_json::json;

use crate::app::{Command, OpId, OpResult, Operation};
use crate::kernel::{EventKey, ProcessId};
use crate::multiconsensus::McEvent;

use super::env::Env;
use super::{Msg, Timer};

/// Closed-loop client: one outstanding operation, retried to every
/// certifier until some reply arrives.
pub(crate) struct ClientNode {
    pub id: ProcessId,
    ops: VecDeque<Operation>,
    current: Option<Operation>,
    hint: ProcessId,
    retry: Option<EventKey>,
    pub completed: usize,
}

impl ClientNode {
    pub fn new(id: ProcessId, ops: Vec<Operation>, hint: ProcessId) -> Self {
        Self {
            id,
            ops: ops.into(),
            current: None,
            hint,
            retry: None,
            completed: 0,
        }
    }

    pub fn done(&self) -> bool {
        self.current.is_none() && self.ops.is_empty()
    }

    fn next(&mut self, env: &mut Env) {
        let Some(op) = self.ops.pop_front() else {
            return;
        };
        env.mc(
            self.id,
            McEvent::Invoke {
                client: self.id,
                op: op.clone(),
            },
        );
        let cmd = Command::new(self.id, op.clone());
        env.send(self.id, &[self.hint], Msg::Request { cmd });
        self.retry = env.timer(self.id, env.timers.client_retry, Timer::ClientRetry { op: op.id });
        self.current = Some(op);
    }

    pub fn on_timer(&mut self, env: &mut Env, t: Timer) {
        match t {
            Timer::Start => self.next(env),
            Timer::ClientRetry { op } => {
                let Some(cur) = self.current.clone().filter(|c| c.id == op) else {
                    return;
                };
                env.note(self.id, "retry", json!({"op": op}));
                let cmd = Command::new(self.id, cur);
                let all = env.certifiers.clone();
                env.send(self.id, &all, Msg::Request { cmd });
                self.retry = env.timer(self.id, env.timers.client_retry, Timer::ClientRetry { op });
            }
            _ => {}
        }
    }

    pub fn on_reply(&mut self, env: &mut Env, from: ProcessId, op: OpId, result: OpResult, leader: Option<ProcessId>) {
        let Some(cur) = self.current.clone().filter(|c| c.id == op) else {
            return;
        };
        env.mc(
            self.id,
            McEvent::Response {
                client: self.id,
                op: cur,
                result,
            },
        );
        if let Some(k) = self.retry.take() {
            env.k.cancel(k);
        }
        self.hint = leader
            .into_iter()
            .chain([from])
            .find(|p| p.is_certifier())
            .unwrap_or(self.hint);
        self.current = None;
        self.completed += 1;
        self.next(env);
    }
}
