//! Hand-built traces and scenarios shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use pregraph::model::{ItemId, OpId, Operation, SiteId, Transaction, TxnId, Value};
use pregraph::sim::{ItemPlacement, Scenario};
use pregraph::replica::{OpSpec, TxnSpec};
use pregraph::trace::{AbortReason, MsgId, Trace, TraceEvent};

/// Builds traces event by event, without running the protocol.
pub struct History {
    trace: Trace,
    next_msg: MsgId,
    op_msg: BTreeMap<OpId, (MsgId, u64)>,
    item_seq: BTreeMap<ItemId, u64>,
    pub txns: BTreeMap<TxnId, Transaction>,
}

impl History {
    pub fn new(sites: &[u32], placement: &[(u32, &[u32])]) -> Self {
        let mut trace = Trace::default();
        trace.push(
            0,
            TraceEvent::Scenario {
                sites: sites.iter().map(|s| SiteId(*s)).collect(),
                placement: placement
                    .iter()
                    .map(|(x, r)| (ItemId(*x), r.iter().map(|s| SiteId(*s)).collect()))
                    .collect(),
                crashes: Vec::new(),
                leader_strategy: "min-alive".into(),
                colocate_leaders: false,
                max_delay: 1,
                seed: 0,
            },
        );
        Self { trace, next_msg: 1000, op_msg: BTreeMap::new(), item_seq: BTreeMap::new(), txns: BTreeMap::new() }
    }

    /// Declares a transaction; `ops` are (item, is_write). Update transactions are
    /// also R-multicast from site 0 to every site.
    pub fn submit(&mut self, id: u64, ops: &[(u32, bool)]) -> Transaction {
        let t = TxnId(id);
        let ops = ops
            .iter()
            .enumerate()
            .map(|(i, (x, w))| {
                let op = OpId::new(t, i as u32);
                if *w {
                    Operation::write(op, ItemId(*x), Value(vec![id as u8]))
                } else {
                    Operation::read(op, ItemId(*x))
                }
            })
            .collect();
        let txn = Transaction::new(t, SiteId(0), 0, 1, ops, BTreeSet::new()).unwrap();
        if txn.is_update() {
            let msg = self.msg();
            let members = match &self.trace.records[0].event {
                TraceEvent::Scenario { sites, .. } => sites.clone(),
                _ => unreachable!(),
            };
            self.trace.push(0, TraceEvent::RMcast { site: SiteId(0), msg, members, txn: txn.clone() });
        }
        self.txns.insert(t, txn.clone());
        txn
    }

    fn msg(&mut self) -> MsgId {
        self.next_msg += 1;
        self.next_msg
    }

    /// First TO-delivery of operation `idx` of `txn` at `site`.
    pub fn deliver(&mut self, site: u32, txn: u64, idx: u32) {
        let op = OpId::new(TxnId(txn), idx);
        let item = self.txns[&TxnId(txn)].op(op).expect("known op").item;
        let (msg, seq) = match self.op_msg.get(&op) {
            Some(m) => *m,
            None => {
                let msg = self.msg();
                let seq = self.item_seq.entry(item).or_default();
                *seq += 1;
                self.op_msg.insert(op, (msg, *seq));
                (msg, *seq)
            }
        };
        self.trace.push(0, TraceEvent::ToDeliver { site: SiteId(site), msg, op, item, seq, first: true });
    }

    pub fn read(&mut self, txn: u64, idx: u32, writer: Option<u64>) {
        let op = OpId::new(TxnId(txn), idx);
        let item = self.txns[&TxnId(txn)].op(op).expect("known op").item;
        self.trace.push(
            0,
            TraceEvent::TxnRead { site: SiteId(0), txn: TxnId(txn), op, item, writer: writer.map(TxnId) },
        );
    }

    pub fn commit(&mut self, site: u32, txn: u64) {
        let read_only = !self.txns[&TxnId(txn)].is_update();
        self.trace.push(0, TraceEvent::TxnCommit { site: SiteId(site), txn: TxnId(txn), read_only });
    }

    pub fn abort(&mut self, site: u32, txn: u64) {
        self.trace.push(0, TraceEvent::TxnAbort { site: SiteId(site), txn: TxnId(txn), reason: AbortReason::Cycle });
    }

    pub fn finish(mut self) -> Trace {
        self.trace.push(0, TraceEvent::End { steps: 0 });
        self.trace
    }
}

pub fn placement(x: u32, replicas: &[u32]) -> ItemPlacement {
    ItemPlacement { id: ItemId(x), replicas: replicas.iter().map(|s| SiteId(*s)).collect() }
}

pub fn txn(id: u64, origin: u32, arrival: u64, ops: Vec<OpSpec>) -> TxnSpec {
    TxnSpec { id: TxnId(id), origin: SiteId(origin), arrival, ops }
}

pub fn w(x: u32, v: &str) -> OpSpec {
    OpSpec::write(ItemId(x), Value(v.as_bytes().to_vec()))
}

pub fn r(x: u32) -> OpSpec {
    OpSpec::read(ItemId(x))
}

pub fn scenario(sites: &[u32], items: Vec<ItemPlacement>, txns: Vec<TxnSpec>) -> Scenario {
    Scenario {
        seed: 1,
        max_delay: 1,
        leader_strategy: Default::default(),
        colocate_leaders: false,
        cycle_cap: pregraph::graph::DEFAULT_CYCLE_CAP,
        suspicion_delay: 10,
        lock_timeout: 40,
        step_cap: 2_000_000,
        sites: sites.iter().map(|s| SiteId(*s)).collect(),
        items,
        txns,
        crashes: Vec::new(),
    }
}
