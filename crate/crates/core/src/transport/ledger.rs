//! Per-entity byte accounting for every framed transfer.

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::Serialize;

use super::frame::MsgType;

/// Entity names used by the protocols; analytics relies on the client prefix.
pub const SERVER: &str = "server";
pub const MAIN_SERVER: &str = "main-server";
pub const FED_SERVER: &str = "fed-server";
const CLIENT_PREFIX: &str = "client-";

pub fn client_entity(k: usize) -> String {
    format!("{CLIENT_PREFIX}{k}")
}

pub fn is_client_entity(name: &str) -> bool {
    name.starts_with(CLIENT_PREFIX)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Sent,
    Received,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct LedgerKey {
    pub entity: String,
    pub peer: String,
    pub direction: Direction,
    pub msg_type: MsgType,
    /// Training round the recording endpoint was in.
    pub round: u32,
}

/// `payload_bytes` counts the type byte plus the payload; `header_bytes` is
/// the non-value part of it (type byte and tensor header). The length
/// prefix is counted only in `framing_bytes`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Counters {
    pub messages: u64,
    pub payload_bytes: u64,
    pub header_bytes: u64,
    pub framing_bytes: u64,
}

impl Counters {
    pub fn value_bytes(&self) -> u64 {
        self.payload_bytes - self.header_bytes
    }

    pub fn add(&mut self, other: &Counters) {
        self.messages += other.messages;
        self.payload_bytes += other.payload_bytes;
        self.header_bytes += other.header_bytes;
        self.framing_bytes += other.framing_bytes;
    }
}

/// Thread-safe ledger shared by all endpoints of a run.
#[derive(Debug, Default)]
pub struct CommLedger {
    entries: Mutex<BTreeMap<LedgerKey, Counters>>,
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, key: LedgerKey, payload_bytes: usize, header_bytes: usize, framing_bytes: usize) {
        let mut entries = self.entries.lock().expect("ledger lock poisoned");
        let c = entries.entry(key).or_default();
        c.messages += 1;
        c.payload_bytes += payload_bytes as u64;
        c.header_bytes += header_bytes as u64;
        c.framing_bytes += framing_bytes as u64;
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot { entries: self.entries.lock().expect("ledger lock poisoned").clone() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LedgerSnapshot {
    pub entries: BTreeMap<LedgerKey, Counters>,
}

impl LedgerSnapshot {
    pub fn sum_where(&self, pred: impl Fn(&LedgerKey) -> bool) -> Counters {
        let mut total = Counters::default();
        for (k, c) in &self.entries {
            if pred(k) {
                total.add(c);
            }
        }
        total
    }

    pub fn total(&self) -> Counters {
        self.sum_where(|_| true)
    }

    pub fn count_type(&self, t: MsgType) -> Counters {
        self.sum_where(|k| k.msg_type == t)
    }

    pub fn rounds(&self) -> u32 {
        self.entries.keys().map(|k| k.round + 1).max().unwrap_or(0)
    }

    /// Per-entity totals partitioned by direction and message type.
    pub fn report(&self) -> LedgerReport {
        let mut entities: BTreeMap<String, EntityTotals> = BTreeMap::new();
        for (k, c) in &self.entries {
            let e = entities.entry(k.entity.clone()).or_default();
            let side = match k.direction {
                Direction::Sent => &mut e.sent,
                Direction::Received => &mut e.received,
            };
            side.entry(k.msg_type.name().to_string()).or_default().add(c);
        }
        for e in entities.values_mut() {
            for c in e.sent.values() {
                e.sent_total.add(c);
            }
            for c in e.received.values() {
                e.received_total.add(c);
            }
        }
        LedgerReport { entities }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EntityTotals {
    pub sent: BTreeMap<String, Counters>,
    pub received: BTreeMap<String, Counters>,
    pub sent_total: Counters,
    pub received_total: Counters,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LedgerReport {
    pub entities: BTreeMap<String, EntityTotals>,
}
