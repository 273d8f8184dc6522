use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::specs::Payload;

/// Totally ordered round identifier: a counter and a tie-breaking process
/// index (Paxos proposer, VSR view manager, or 0 for Zab epochs).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct RoundId {
    pub counter: u32,
    pub id: u32,
}

impl RoundId {
    pub const ZERO: RoundId = RoundId { counter: 0, id: 0 };

    pub fn new(counter: u32, id: u32) -> Self {
        Self { counter, id }
    }

    pub fn epoch(e: u32) -> Self {
        Self { counter: e, id: 0 }
    }
}

impl fmt::Display for RoundId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.counter, self.id)
    }
}

impl FromStr for RoundId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let (c, i) = s.split_once('.').unwrap_or((s, "0"));
        let counter = c.parse().map_err(|_| format!("bad round id {s:?}"))?;
        let id = i.parse().map_err(|_| format!("bad round id {s:?}"))?;
        Ok(Self { counter, id })
    }
}

impl From<RoundId> for String {
    fn from(r: RoundId) -> String {
        r.to_string()
    }
}

impl TryFrom<String> for RoundId {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

/// ⟨round, payload or ⊥⟩.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Progress {
    pub round: RoundId,
    pub payload: Option<Payload>,
}

impl Progress {
    pub fn empty(round: RoundId) -> Self {
        Self { round, payload: None }
    }

    pub fn of(round: RoundId, payload: Payload) -> Self {
        Self {
            round,
            payload: Some(payload),
        }
    }

    /// Strictly succeeds (≻). Two distinct payloads in one round are
    /// incomparable and yield `false` both ways.
    pub fn succeeds(&self, other: &Progress) -> bool {
        matches!(pi_compare(self, other), Ok(Ordering::Greater))
    }
}

impl fmt::Display for Progress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.payload {
            Some(p) => write!(f, "<{}, {p}>", self.round),
            None => write!(f, "<{}, _>", self.round),
        }
    }
}

/// Two different payloads certified in the same round.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("round {round} carries two payloads: {a} and {b}")]
pub struct RoundConflict {
    pub round: RoundId,
    pub a: Payload,
    pub b: Payload,
}

/// Compares progress indicators under ≻: higher round wins, and within a
/// round a payload beats ⊥.
pub fn pi_compare(a: &Progress, b: &Progress) -> Result<Ordering, RoundConflict> {
    match a.round.cmp(&b.round) {
        Ordering::Equal => match (&a.payload, &b.payload) {
            (Some(x), Some(y)) if x != y => Err(RoundConflict {
                round: a.round,
                a: x.clone(),
                b: y.clone(),
            }),
            (Some(_), None) => Ok(Ordering::Greater),
            (None, Some(_)) => Ok(Ordering::Less),
            _ => Ok(Ordering::Equal),
        },
        o => Ok(o),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::app::{Command, OpKind, Operation};
    use crate::kernel::ProcessId;

    fn c(id: u64) -> Payload {
        Payload::Command(Command::new(ProcessId::client(0), Operation::new(id, OpKind::Inc)))
    }

    fn r(n: u32) -> RoundId {
        RoundId::new(n, 0)
    }

    #[test]
    fn ordering_examples() {
        let a = Progress::empty(r(2));
        let b = Progress::of(r(1), c(1));
        assert_eq!(pi_compare(&a, &b), Ok(Ordering::Greater));
        let a = Progress::of(r(1), c(1));
        let b = Progress::empty(r(1));
        assert_eq!(pi_compare(&a, &b), Ok(Ordering::Greater));
        assert_eq!(pi_compare(&a, &a), Ok(Ordering::Equal));
        assert!(!a.succeeds(&a));
    }

    #[test]
    fn equal_round_distinct_payloads_conflict() {
        let err = pi_compare(&Progress::of(r(1), c(1)), &Progress::of(r(1), c(2))).unwrap_err();
        assert_eq!(err.round, r(1));
    }

    #[test]
    fn round_ids_are_lexicographic() {
        assert!(RoundId::new(1, 2) > RoundId::new(1, 1));
        assert!(RoundId::new(2, 0) > RoundId::new(1, 9));
        assert_eq!("3.1".parse::<RoundId>().unwrap(), RoundId::new(3, 1));
        assert_eq!("4".parse::<RoundId>().unwrap(), RoundId::epoch(4));
        let json = serde_json::to_string(&RoundId::new(2, 5)).unwrap();
        assert_eq!(json, "\"2.5\"");
    }
}
