//! Deterministic applications replicated by every specification and engine.
//!
//! Two applications are provided: an integer register and a small key-value
//! map. [`next_state`] is the pure transition function; [`apply_update`]
//! installs a precomputed [`StateUpdate`] and refuses updates computed on a
//! different state.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::kernel::ProcessId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OpId(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OpKind {
    Inc,
    Double,
    Set { value: i64 },
    Read,
    Put { key: String, value: i64 },
    Get { key: String },
    Noop,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Operation {
    pub id: OpId,
    #[serde(flatten)]
    pub kind: OpKind,
}

impl Operation {
    pub fn new(id: u64, kind: OpKind) -> Self {
        Self { id: OpId(id), kind }
    }
}

/// A client operation as submitted for ordering.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Command {
    pub client: ProcessId,
    pub op: Operation,
}

impl Command {
    pub fn new(client: ProcessId, op: Operation) -> Self {
        Self { client, op }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "result")]
pub enum OpResult {
    Value { value: i64 },
    Absent,
    Done,
    Error { reason: String },
}

impl OpResult {
    fn value(value: i64) -> Self {
        OpResult::Value { value }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Digest(pub u64);

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "app")]
pub enum AppState {
    Register { value: i64 },
    Kv { entries: BTreeMap<String, i64> },
}

impl AppState {
    /// Stable digest: first eight bytes of SHA-256 over the canonical JSON
    /// encoding.
    pub fn digest(&self) -> Digest {
        let bytes = serde_json::to_vec(self).expect("app state serializes");
        let hash = Sha256::digest(&bytes);
        let mut head = [0u8; 8];
        head.copy_from_slice(&hash[..8]);
        Digest(u64::from_be_bytes(head))
    }

    pub fn register_value(&self) -> Option<i64> {
        match self {
            AppState::Register { value } => Some(*value),
            AppState::Kv { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum AppConfig {
    Register {
        #[serde(default)]
        init: i64,
    },
    Kv,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig::Register { init: 0 }
    }
}

impl AppConfig {
    /// The initial state, written ⊥ in the abstract specifications.
    pub fn initial_state(&self) -> AppState {
        match self {
            AppConfig::Register { init } => AppState::Register { value: *init },
            AppConfig::Kv => AppState::Kv {
                entries: BTreeMap::new(),
            },
        }
    }
}

/// The application transition function. Operations that do not fit the
/// application yield an error result and leave the state unchanged.
pub fn next_state(state: &AppState, cmd: &Command) -> (OpResult, AppState) {
    match (state, &cmd.op.kind) {
        (_, OpKind::Noop) => (OpResult::Done, state.clone()),
        (AppState::Register { value }, kind) => {
            let next = match kind {
                OpKind::Inc => value.checked_add(1),
                OpKind::Double => value.checked_mul(2),
                OpKind::Set { value } => Some(*value),
                OpKind::Read => return (OpResult::value(*value), state.clone()),
                _ => return (mismatch(kind, "register"), state.clone()),
            };
            match next {
                Some(v) => (OpResult::value(v), AppState::Register { value: v }),
                None => (
                    OpResult::Error {
                        reason: "overflow".into(),
                    },
                    state.clone(),
                ),
            }
        }
        (AppState::Kv { entries }, kind) => match kind {
            OpKind::Put { key, value } => {
                let mut entries = entries.clone();
                entries.insert(key.clone(), *value);
                (OpResult::value(*value), AppState::Kv { entries })
            }
            OpKind::Get { key } => {
                let res = entries
                    .get(key)
                    .map_or(OpResult::Absent, |v| OpResult::value(*v));
                (res, state.clone())
            }
            _ => (mismatch(kind, "kv"), state.clone()),
        },
    }
}

fn mismatch(kind: &OpKind, app: &str) -> OpResult {
    OpResult::Error {
        reason: format!("{kind:?} is not a {app} operation"),
    }
}

/// A state update produced by a primary: the digest of the state it was
/// computed on, the command, its result and the full resulting state.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateUpdate {
    pub old: Digest,
    pub cmd: Command,
    pub result: OpResult,
    pub new: AppState,
}

impl StateUpdate {
    /// Execute `cmd` on `state` and package the outcome.
    pub fn compute(state: &AppState, cmd: &Command) -> Self {
        let (result, new) = next_state(state, cmd);
        Self {
            old: state.digest(),
            cmd: cmd.clone(),
            result,
            new,
        }
    }

    /// Whether the update is exactly what `next_state` yields on a state
    /// with digest `old`.
    pub fn is_consistent_with(&self, old: &AppState) -> bool {
        old.digest() == self.old && next_state(old, &self.cmd) == (self.result.clone(), self.new.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("prefix order violation: update built on {expected}, applied to {actual}")]
pub struct PrefixOrderViolation {
    pub expected: Digest,
    pub actual: Digest,
}

pub fn apply_update(state: &AppState, update: &StateUpdate) -> Result<AppState, PrefixOrderViolation> {
    let actual = state.digest();
    if actual != update.old {
        return Err(PrefixOrderViolation {
            expected: update.old,
            actual,
        });
    }
    Ok(update.new.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reg(v: i64) -> AppState {
        AppState::Register { value: v }
    }

    fn cmd(id: u64, kind: OpKind) -> Command {
        Command::new(ProcessId::client(0), Operation::new(id, kind))
    }

    #[test]
    fn register_example_values() {
        assert_eq!(next_state(&reg(3), &cmd(1, OpKind::Inc)), (OpResult::value(4), reg(4)));
        assert_eq!(next_state(&reg(3), &cmd(1, OpKind::Double)), (OpResult::value(6), reg(6)));
        assert_eq!(next_state(&reg(4), &cmd(1, OpKind::Double)), (OpResult::value(8), reg(8)));
        assert_eq!(next_state(&reg(6), &cmd(1, OpKind::Inc)), (OpResult::value(7), reg(7)));
        assert_eq!(next_state(&reg(5), &cmd(1, OpKind::Read)), (OpResult::value(5), reg(5)));
    }

    #[test]
    fn kv_get_on_empty_state() {
        let empty = AppConfig::Kv.initial_state();
        let (res, next) = next_state(&empty, &cmd(1, OpKind::Get { key: "k".into() }));
        assert_eq!(res, OpResult::Absent);
        assert_eq!(next, empty);
        let (res, next) = next_state(&empty, &cmd(2, OpKind::Put { key: "k".into(), value: 9 }));
        assert_eq!(res, OpResult::value(9));
        let (res, _) = next_state(&next, &cmd(3, OpKind::Get { key: "k".into() }));
        assert_eq!(res, OpResult::value(9));
    }

    #[test]
    fn malformed_ops_yield_errors_not_panics() {
        let (res, next) = next_state(&reg(1), &cmd(1, OpKind::Get { key: "k".into() }));
        assert!(matches!(res, OpResult::Error { .. }));
        assert_eq!(next, reg(1));
        let (res, next) = next_state(&reg(i64::MAX), &cmd(1, OpKind::Inc));
        assert!(matches!(res, OpResult::Error { .. }));
        assert_eq!(next, reg(i64::MAX));
        let kv = AppConfig::Kv.initial_state();
        assert!(matches!(next_state(&kv, &cmd(1, OpKind::Inc)).0, OpResult::Error { .. }));
    }

    #[test]
    fn apply_update_checks_the_base_state() {
        let four = reg(4);
        let dbl = StateUpdate::compute(&four, &cmd(2, OpKind::Double));
        assert_eq!(apply_update(&four, &dbl).unwrap(), reg(8));
        // update 6 -> 7 applied after 4: the anomalous interleaving
        let inc_on_six = StateUpdate::compute(&reg(6), &cmd(1, OpKind::Inc));
        assert_eq!(inc_on_six.new, reg(7));
        let err = apply_update(&four, &inc_on_six).unwrap_err();
        assert_eq!(err.actual, four.digest());
        assert_eq!(err.expected, reg(6).digest());
    }

    #[test]
    fn digest_is_injective_on_small_registers() {
        let mut seen = std::collections::HashMap::new();
        for v in -2000..2000 {
            let d = reg(v).digest();
            assert!(seen.insert(d, v).is_none(), "collision at {v}");
        }
    }

    fn op_kind() -> impl Strategy<Value = OpKind> {
        prop_oneof![
            Just(OpKind::Inc),
            Just(OpKind::Double),
            (-50i64..50).prop_map(|value| OpKind::Set { value }),
            Just(OpKind::Read),
            Just(OpKind::Noop),
        ]
    }

    proptest! {
        #[test]
        fn next_state_is_deterministic(v in -1000i64..1000, k in op_kind()) {
            let c = cmd(1, k);
            prop_assert_eq!(next_state(&reg(v), &c), next_state(&reg(v), &c));
        }

        #[test]
        fn replaying_updates_equals_replaying_commands(init in -100i64..100, kinds in proptest::collection::vec(op_kind(), 0..12)) {
            let cmds: Vec<Command> = kinds.into_iter().enumerate().map(|(i, k)| cmd(i as u64, k)).collect();
            let mut active = reg(init);
            let mut updates = Vec::new();
            for c in &cmds {
                let u = StateUpdate::compute(&active, c);
                prop_assert!(u.is_consistent_with(&active));
                active = next_state(&active, c).1;
                updates.push(u);
            }
            let mut passive = reg(init);
            for u in &updates {
                passive = apply_update(&passive, u).unwrap();
            }
            prop_assert_eq!(active, passive);
        }
    }
}
