//! Structured run trace: one JSON object per line, fields in a fixed order.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::graph::PrecedenceGraph;
use crate::lock::LockMode;
use crate::model::{ItemId, OpId, SiteId, Transaction, TxnId};

pub type MsgId = u64;

/// Network message classes used for accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsgClass {
    /// Reliable multicast: sender to member.
    UrmData,
    /// Reliable multicast: member relay.
    UrmEcho,
    /// Total order multicast: proposal to the group.
    TomPropose,
    /// Total order multicast: ordered delivery notice.
    TomOrder,
    /// Predecessor graph sent after a first TO-delivery.
    Graph,
    /// Predecessor graph relayed after merging a received graph.
    GraphRelay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalAbortReason {
    /// Revoked by a certified write.
    ForceLock,
    LockTimeout,
    OriginCrashed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbortReason {
    /// Flagged during certification for reading an outdated value.
    OutdatedRead,
    /// Chosen by the cycle-breaking heuristic.
    Cycle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Scenario {
        sites: BTreeSet<SiteId>,
        #[serde(with = "pairs")]
        placement: BTreeMap<ItemId, BTreeSet<SiteId>>,
        crashes: Vec<(SiteId, u64)>,
        leader_strategy: String,
        colocate_leaders: bool,
        max_delay: u64,
        seed: u64,
    },
    TxnBegin {
        site: SiteId,
        txn: TxnId,
    },
    /// A read performed during initial execution and the writer of the version it saw.
    TxnRead {
        site: SiteId,
        txn: TxnId,
        op: OpId,
        item: ItemId,
        writer: Option<TxnId>,
    },
    LockGrant {
        site: SiteId,
        item: ItemId,
        op: OpId,
        mode: LockMode,
    },
    LockQueue {
        site: SiteId,
        item: ItemId,
        op: OpId,
        mode: LockMode,
    },
    ForceLockAbort {
        site: SiteId,
        item: ItemId,
        op: OpId,
        victim: TxnId,
    },
    LocalAbort {
        site: SiteId,
        txn: TxnId,
        reason: LocalAbortReason,
    },
    RMcast {
        site: SiteId,
        msg: MsgId,
        members: BTreeSet<SiteId>,
        txn: Transaction,
    },
    Send {
        site: SiteId,
        to: SiteId,
        msg: MsgId,
        class: MsgClass,
        txn: TxnId,
        op: Option<OpId>,
        failover: bool,
    },
    RDeliver {
        site: SiteId,
        msg: MsgId,
        txn: TxnId,
    },
    ToMcast {
        site: SiteId,
        msg: MsgId,
        op: OpId,
        item: ItemId,
        failover: bool,
    },
    ToOrder {
        msg: MsgId,
        item: ItemId,
        #[serde(rename = "position")]
        seq: u64,
        op: OpId,
    },
    ToDeliver {
        site: SiteId,
        msg: MsgId,
        op: OpId,
        item: ItemId,
        #[serde(rename = "position")]
        seq: u64,
        first: bool,
    },
    SetAborted {
        site: SiteId,
        txn: TxnId,
        op: OpId,
    },
    GraphRecv {
        site: SiteId,
        from: SiteId,
        msg: MsgId,
        merged: bool,
    },
    TxnCommit {
        site: SiteId,
        txn: TxnId,
        read_only: bool,
    },
    TxnAbort {
        site: SiteId,
        txn: TxnId,
        reason: AbortReason,
    },
    ValueApplied {
        site: SiteId,
        txn: TxnId,
        op: OpId,
        item: ItemId,
    },
    ValueSkipped {
        site: SiteId,
        txn: TxnId,
        op: OpId,
        item: ItemId,
    },
    ProtocolError {
        site: SiteId,
        detail: String,
    },
    Crash {
        site: SiteId,
    },
    Suspect {
        site: SiteId,
    },
    FinalState {
        site: SiteId,
        #[serde(with = "pairs")]
        leaders: BTreeMap<ItemId, SiteId>,
        graph: PrecedenceGraph,
    },
    End {
        steps: u64,
    },
}

impl TraceEvent {
    /// The site the event happened at, when there is one.
    pub fn site(&self) -> Option<SiteId> {
        use TraceEvent::*;
        match self {
            Scenario { .. } | ToOrder { .. } | End { .. } => None,
            TxnBegin { site, .. }
            | TxnRead { site, .. }
            | LockGrant { site, .. }
            | LockQueue { site, .. }
            | ForceLockAbort { site, .. }
            | LocalAbort { site, .. }
            | RMcast { site, .. }
            | Send { site, .. }
            | RDeliver { site, .. }
            | ToMcast { site, .. }
            | ToDeliver { site, .. }
            | SetAborted { site, .. }
            | GraphRecv { site, .. }
            | TxnCommit { site, .. }
            | TxnAbort { site, .. }
            | ValueApplied { site, .. }
            | ValueSkipped { site, .. }
            | ProtocolError { site, .. }
            | Crash { site }
            | Suspect { site }
            | FinalState { site, .. } => Some(*site),
        }
    }
}

// Integer-keyed maps as `[[k, v], ...]`: JSON object keys are strings, which
// do not survive the buffering done for tagged and flattened enums.
mod pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<K: Serialize, V: Serialize, S: Serializer>(
        m: &BTreeMap<K, V>,
        s: S,
    ) -> Result<S::Ok, S::Error> {
        s.collect_seq(m.iter())
    }

    pub fn deserialize<'de, K, V, D>(d: D) -> Result<BTreeMap<K, V>, D::Error>
    where
        K: Deserialize<'de> + Ord,
        V: Deserialize<'de>,
        D: Deserializer<'de>,
    {
        Ok(Vec::<(K, V)>::deserialize(d)?.into_iter().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub seq: u64,
    pub time: u64,
    #[serde(flatten)]
    pub event: TraceEvent,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn push(&mut self, time: u64, event: TraceEvent) {
        let seq = self.records.len() as u64;
        self.records.push(TraceRecord { seq, time, event });
    }

    pub fn events(&self) -> impl Iterator<Item = &TraceEvent> {
        self.records.iter().map(|r| &r.event)
    }

    pub fn write_ndjson<W: Write>(&self, mut w: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_ndjson(&self) -> String {
        let mut buf = Vec::new();
        self.write_ndjson(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_ndjson<R: BufRead>(r: R) -> Result<Self, TraceParseError> {
        let mut records = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| TraceParseError { line: n + 1, detail: e.to_string() })?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TraceRecord = serde_json::from_str(&line)
                .map_err(|e| TraceParseError { line: n + 1, detail: e.to_string() })?;
            records.push(rec);
        }
        Ok(Self { records })
    }

    pub fn from_ndjson(s: &str) -> Result<Self, TraceParseError> {
        Self::read_ndjson(s.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("trace line {line}: {detail}")]
pub struct TraceParseError {
    pub line: usize,
    pub detail: String,
}
