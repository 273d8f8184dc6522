use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ProcessId, VirtualTime};

/// Which abstract set a network message implements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolTag {
    Input,
    Output,
    Certified,
    Snapshot,
    Protocol,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum DeliveryStatus {
    InFlight { attempts: u32 },
    Delivered { at: VirtualTime, attempts: u32 },
    /// Dropped with retransmission disabled. The entry stays in the pool.
    Lost,
    /// Recipient crashed first.
    Cancelled,
}

#[derive(Debug, Clone)]
pub struct PoolEntry<M> {
    pub tag: PoolTag,
    pub label: String,
    pub sender: ProcessId,
    pub sent_at: VirtualTime,
    pub payload: M,
    pub deliveries: BTreeMap<ProcessId, DeliveryStatus>,
}

/// Every message ever sent. Entries are appended and never removed.
#[derive(Debug, Clone)]
pub struct MessagePool<M> {
    entries: Vec<PoolEntry<M>>,
}

impl<M> Default for MessagePool<M> {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
        }
    }
}

impl<M> MessagePool<M> {
    pub(super) fn push(
        &mut self,
        tag: PoolTag,
        label: &str,
        sender: ProcessId,
        sent_at: VirtualTime,
        payload: M,
        recipients: &[ProcessId],
    ) -> usize {
        let deliveries = recipients
            .iter()
            .map(|&r| (r, DeliveryStatus::InFlight { attempts: 0 }))
            .collect();
        self.entries.push(PoolEntry {
            tag,
            label: label.to_string(),
            sender,
            sent_at,
            payload,
            deliveries,
        });
        self.entries.len() - 1
    }

    pub(super) fn set_status(&mut self, entry: usize, to: ProcessId, status: DeliveryStatus) {
        self.entries[entry].deliveries.insert(to, status);
    }

    pub(super) fn bump_attempts(&mut self, entry: usize, to: ProcessId) -> u32 {
        let slot = self.entries[entry]
            .deliveries
            .entry(to)
            .or_insert(DeliveryStatus::InFlight { attempts: 0 });
        match slot {
            DeliveryStatus::InFlight { attempts } => {
                *attempts += 1;
                *attempts
            }
            _ => 1,
        }
    }

    pub fn entry(&self, i: usize) -> &PoolEntry<M> {
        &self.entries[i]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PoolEntry<M>> {
        self.entries.iter()
    }

    /// Entries sent at or before `t`.
    pub fn sent_by(&self, t: VirtualTime) -> impl Iterator<Item = &PoolEntry<M>> {
        self.entries.iter().filter(move |e| e.sent_at <= t)
    }
}
