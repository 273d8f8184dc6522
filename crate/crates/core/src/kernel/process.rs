use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ProcessKind {
    Client,
    Replica,
    Certifier,
    Oracle,
}

impl ProcessKind {
    fn as_str(self) -> &'static str {
        match self {
            ProcessKind::Client => "client",
            ProcessKind::Replica => "replica",
            ProcessKind::Certifier => "certifier",
            ProcessKind::Oracle => "oracle",
        }
    }
}

/// A simulated process, written `kind:index` in traces and configs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ProcessId {
    pub kind: ProcessKind,
    pub index: u32,
}

impl ProcessId {
    pub const fn new(kind: ProcessKind, index: u32) -> Self {
        Self { kind, index }
    }
    pub const fn client(index: u32) -> Self {
        Self::new(ProcessKind::Client, index)
    }
    pub const fn replica(index: u32) -> Self {
        Self::new(ProcessKind::Replica, index)
    }
    pub const fn certifier(index: u32) -> Self {
        Self::new(ProcessKind::Certifier, index)
    }
    pub const fn oracle(index: u32) -> Self {
        Self::new(ProcessKind::Oracle, index)
    }
    pub fn is_certifier(&self) -> bool {
        self.kind == ProcessKind::Certifier
    }
}

impl fmt::Display for ProcessId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.as_str(), self.index)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("malformed process id `{0}` (expected kind:index)")]
pub struct ParseProcessIdError(String);

impl FromStr for ProcessId {
    type Err = ParseProcessIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseProcessIdError(s.to_string());
        let (kind, index) = s.split_once(':').ok_or_else(err)?;
        let kind = match kind {
            "client" => ProcessKind::Client,
            "replica" => ProcessKind::Replica,
            "certifier" => ProcessKind::Certifier,
            "oracle" => ProcessKind::Oracle,
            _ => return Err(err()),
        };
        let index = index.parse().map_err(|_| err())?;
        Ok(ProcessId { kind, index })
    }
}

impl Serialize for ProcessId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ProcessId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Simulated time in abstract ticks.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct VirtualTime(pub u64);

impl VirtualTime {
    pub const ZERO: VirtualTime = VirtualTime(0);

    pub fn after(self, ticks: u64) -> VirtualTime {
        VirtualTime(self.0.saturating_add(ticks))
    }
}

impl fmt::Display for VirtualTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "t{}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn process_id_text_form() {
        let p: ProcessId = "certifier:2".parse().unwrap();
        assert_eq!(p, ProcessId::certifier(2));
        assert_eq!(p.to_string(), "certifier:2");
        assert!("node:1".parse::<ProcessId>().is_err());
        assert!("client:x".parse::<ProcessId>().is_err());
        let json = serde_json::to_string(&ProcessId::client(3)).unwrap();
        assert_eq!(json, "\"client:3\"");
    }
}
