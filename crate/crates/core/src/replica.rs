//! Per-site protocol state machine.
//!
//! A replica executes local transactions under two-phase locking without
//! applying their writes, submits update transactions by reliable multicast,
//! orders each operation through the total-order group of its item, certifies
//! operations on first delivery, exchanges predecessor graphs until
//! transactions are closed, and then commits or aborts them deterministically.
//!
//! Handlers never block and never talk to the network directly: every effect is
//! appended to an [`Outbox`] that the simulator drains.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::graph::{GraphError, PrecedenceGraph};
use crate::lock::{Grant, LockMode, LockTable};
use crate::model::{
    concurrent, conflict, ItemId, OpId, Operation, ReplicationMap, SiteId, Transaction, TxnId,
    Value,
};
use crate::trace::{AbortReason, LocalAbortReason, TraceEvent};

/// One operation of a client transaction before execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpSpec {
    pub item: ItemId,
    /// Update value for writes; `None` for reads.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub write: Option<Value>,
}

impl OpSpec {
    pub fn read(item: ItemId) -> Self {
        Self { item, write: None }
    }

    pub fn write(item: ItemId, value: Value) -> Self {
        Self { item, write: Some(value) }
    }
}

/// A client transaction submitted to its origin site.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxnSpec {
    pub id: TxnId,
    pub origin: SiteId,
    pub arrival: u64,
    pub ops: Vec<OpSpec>,
}

/// How a transaction's initial execution ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExecOutcome {
    ReadOnlyCommitted,
    ReadyToSubmit(Arc<Transaction>),
    LocallyAborted(LocalAbortReason),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReplicaError {
    #[error("site {site} does not replicate {item} used by {txn}")]
    UnreplicatedItem { site: SiteId, txn: TxnId, item: ItemId },
    #[error("transaction {0} is already executing")]
    AlreadyExecuting(TxnId),
    #[error("transaction {0} has no operations")]
    EmptyTransaction(TxnId),
}

#[derive(Debug, Clone)]
pub enum Outgoing {
    RMcast { txn: Arc<Transaction>, members: BTreeSet<SiteId> },
    ToMcast { op: OpId, item: ItemId, txn: Arc<Transaction> },
    Graph { to: SiteId, subject: TxnId, graph: Arc<PrecedenceGraph>, relay: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timer {
    ExecStep { txn: TxnId, after: u64 },
    LockTimeout { txn: TxnId, epoch: u64, after: u64 },
}

/// Effects produced by one handler invocation.
#[derive(Debug, Default)]
pub struct Outbox {
    pub trace: Vec<TraceEvent>,
    pub sends: Vec<Outgoing>,
    pub timers: Vec<Timer>,
    pub outcomes: Vec<(TxnId, ExecOutcome)>,
}

/// Current value of an item together with the writer that produced it.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Version {
    pub value: Value,
    pub writer: Option<TxnId>,
    /// Position of the producing write in this site's delivery log for the item.
    pub position: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct ReplicaConfig {
    pub cycle_cap: usize,
    /// Time between two operations of an executing transaction.
    pub exec_step: u64,
    /// Waiting longer than this for a lock aborts the executing transaction.
    pub lock_timeout: u64,
}

impl Default for ReplicaConfig {
    fn default() -> Self {
        Self { cycle_cap: crate::graph::DEFAULT_CYCLE_CAP, exec_step: 1, lock_timeout: 40 }
    }
}

#[derive(Debug, Clone)]
struct Execution {
    spec: TxnSpec,
    start: u64,
    next: usize,
    waiting: Option<OpId>,
    epoch: u64,
    buffer: BTreeMap<ItemId, Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Committed,
    Aborted,
}

pub struct Replica {
    site: SiteId,
    map: Arc<ReplicationMap>,
    config: ReplicaConfig,
    db: BTreeMap<ItemId, Version>,
    locks: LockTable,
    graph: PrecedenceGraph,
    pending: BTreeSet<OpId>,
    known: BTreeMap<TxnId, Arc<Transaction>>,
    multicast: BTreeSet<OpId>,
    delivery_log: BTreeMap<ItemId, Vec<OpId>>,
    delivered: BTreeMap<OpId, usize>,
    committed: BTreeSet<TxnId>,
    aborted: BTreeSet<TxnId>,
    executing: BTreeMap<TxnId, Execution>,
}

impl Replica {
    pub fn new(site: SiteId, map: Arc<ReplicationMap>, config: ReplicaConfig) -> Self {
        let db = map.items_at(site).into_iter().map(|x| (x, Version::default())).collect();
        Self {
            site,
            map,
            config,
            db,
            locks: LockTable::new(),
            graph: PrecedenceGraph::new(),
            pending: BTreeSet::new(),
            known: BTreeMap::new(),
            multicast: BTreeSet::new(),
            delivery_log: BTreeMap::new(),
            delivered: BTreeMap::new(),
            committed: BTreeSet::new(),
            aborted: BTreeSet::new(),
            executing: BTreeMap::new(),
        }
    }

    pub fn site(&self) -> SiteId {
        self.site
    }

    pub fn graph(&self) -> &PrecedenceGraph {
        &self.graph
    }

    pub fn committed(&self) -> &BTreeSet<TxnId> {
        &self.committed
    }

    pub fn aborted(&self) -> &BTreeSet<TxnId> {
        &self.aborted
    }

    pub fn pending(&self) -> &BTreeSet<OpId> {
        &self.pending
    }

    pub fn locks(&self) -> &LockTable {
        &self.locks
    }

    pub fn db(&self) -> &BTreeMap<ItemId, Version> {
        &self.db
    }

    pub fn delivery_log(&self, item: ItemId) -> &[OpId] {
        self.delivery_log.get(&item).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn decision(&self, t: TxnId) -> Option<Decision> {
        if self.committed.contains(&t) {
            Some(Decision::Committed)
        } else if self.aborted.contains(&t) {
            Some(Decision::Aborted)
        } else {
            None
        }
    }

    pub fn has_delivered(&self, op: OpId) -> bool {
        self.delivered.contains_key(&op)
    }

    pub fn is_executing(&self, t: TxnId) -> bool {
        self.executing.contains_key(&t)
    }

    // ----------------------------------------------------------------------
    // Initial execution

    /// Starts executing a client transaction at this (origin) site.
    pub fn begin(&mut self, spec: TxnSpec, now: u64, out: &mut Outbox) -> Result<(), ReplicaError> {
        if spec.ops.is_empty() {
            return Err(ReplicaError::EmptyTransaction(spec.id));
        }
        if let Some(op) = spec.ops.iter().find(|o| !self.map.replicates(self.site, o.item)) {
            return Err(ReplicaError::UnreplicatedItem {
                site: self.site,
                txn: spec.id,
                item: op.item,
            });
        }
        if self.executing.contains_key(&spec.id) {
            return Err(ReplicaError::AlreadyExecuting(spec.id));
        }
        let id = spec.id;
        out.trace.push(TraceEvent::TxnBegin { site: self.site, txn: id });
        self.executing.insert(
            id,
            Execution {
                spec,
                start: now,
                next: 0,
                waiting: None,
                epoch: 0,
                buffer: BTreeMap::new(),
            },
        );
        self.exec_step(id, now, out);
        Ok(())
    }

    /// Runs the next operation of an executing transaction, or its commit statement.
    pub fn exec_step(&mut self, txn: TxnId, now: u64, out: &mut Outbox) {
        let Some(exec) = self.executing.get(&txn) else { return };
        if exec.waiting.is_some() {
            return;
        }
        if exec.next == exec.spec.ops.len() {
            self.finish_execution(txn, now, out);
            return;
        }
        let idx = exec.next;
        let spec = exec.spec.ops[idx].clone();
        let op = OpId::new(txn, idx as u32);
        let mode = if spec.write.is_some() { LockMode::W } else { LockMode::R };
        match self.locks.request(spec.item, op, mode).expect("fresh operation id") {
            Grant::Granted => {
                out.trace.push(TraceEvent::LockGrant { site: self.site, item: spec.item, op, mode });
                self.perform(op, out);
            }
            Grant::Enqueued => {
                out.trace.push(TraceEvent::LockQueue { site: self.site, item: spec.item, op, mode });
                let exec = self.executing.get_mut(&txn).expect("executing");
                exec.waiting = Some(op);
                exec.epoch += 1;
                out.timers.push(Timer::LockTimeout {
                    txn,
                    epoch: exec.epoch,
                    after: self.config.lock_timeout,
                });
            }
        }
    }

    pub fn lock_timeout(&mut self, txn: TxnId, epoch: u64, out: &mut Outbox) {
        let timed_out = self
            .executing
            .get(&txn)
            .is_some_and(|e| e.waiting.is_some() && e.epoch == epoch);
        if timed_out {
            self.abort_execution(txn, LocalAbortReason::LockTimeout, out);
        }
    }

    /// Performs an operation whose lock is held, then schedules the next step.
    fn perform(&mut self, op: OpId, out: &mut Outbox) {
        let site = self.site;
        let exec = self.executing.get_mut(&op.txn).expect("executing");
        let spec = &exec.spec.ops[op.idx as usize];
        match &spec.write {
            Some(v) => {
                exec.buffer.insert(spec.item, v.clone());
            }
            None => {
                let writer = if exec.buffer.contains_key(&spec.item) {
                    Some(op.txn)
                } else {
                    self.db.get(&spec.item).and_then(|v| v.writer)
                };
                out.trace.push(TraceEvent::TxnRead { site, txn: op.txn, op, item: spec.item, writer });
            }
        }
        exec.waiting = None;
        exec.next = op.idx as usize + 1;
        out.timers.push(Timer::ExecStep { txn: op.txn, after: self.config.exec_step });
    }

    fn finish_execution(&mut self, txn: TxnId, now: u64, out: &mut Outbox) {
        let exec = self.executing.remove(&txn).expect("executing");
        let ops: Vec<Operation> = exec
            .spec
            .ops
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let id = OpId::new(txn, i as u32);
                match &s.write {
                    Some(v) => Operation::write(id, s.item, v.clone()),
                    None => Operation::read(id, s.item),
                }
            })
            .collect();
        let end = now.max(exec.start + 1);
        // Every write committed here before this point was either seen by the
        // transaction or revoked one of its locks, so this snapshot is exact.
        let snapshot = self.committed.clone();
        let t = Transaction::new(txn, self.site, exec.start, end, ops, snapshot)
            .expect("well-formed transaction");
        let grants = self.locks.release_reads(txn);
        if !t.is_update() {
            let mut grants = grants;
            grants.extend(self.locks.release_txn(txn));
            self.committed.insert(txn);
            out.trace.push(TraceEvent::TxnCommit { site: self.site, txn, read_only: true });
            out.outcomes.push((txn, ExecOutcome::ReadOnlyCommitted));
            self.resume_granted(grants, out);
            return;
        }
        let mut grants = grants;
        for w in t.writes() {
            grants.extend(
                self.locks
                    .convert_w_to_iw(w.item, w.id)
                    .expect("write lock held at commit statement")
                    .into_iter()
                    .map(|o| (w.item, o)),
            );
        }
        let t = Arc::new(t);
        let members = self.map.replicas_of_txn(&t);
        out.sends.push(Outgoing::RMcast { txn: t.clone(), members });
        out.outcomes.push((txn, ExecOutcome::ReadyToSubmit(t)));
        self.resume_granted(grants, out);
    }

    fn abort_execution(&mut self, txn: TxnId, reason: LocalAbortReason, out: &mut Outbox) {
        if self.executing.remove(&txn).is_none() {
            return;
        }
        out.trace.push(TraceEvent::LocalAbort { site: self.site, txn, reason });
        out.outcomes.push((txn, ExecOutcome::LocallyAborted(reason)));
        let grants = self.locks.release_txn(txn);
        self.resume_granted(grants, out);
    }

    /// Lets executing transactions whose queued request was just granted proceed.
    fn resume_granted(&mut self, grants: Vec<(ItemId, OpId)>, out: &mut Outbox) {
        for (item, op) in grants {
            let Some(exec) = self.executing.get(&op.txn) else { continue };
            if exec.waiting != Some(op) {
                continue;
            }
            let mode = self.locks.mode_held(item, op).expect("just granted");
            out.trace.push(TraceEvent::LockGrant { site: self.site, item, op, mode });
            self.perform(op, out);
        }
    }

    // ----------------------------------------------------------------------
    // Submission

    /// R-delivery of a submitted transaction: its local operations become pending.
    pub fn on_r_deliver(
        &mut self,
        txn: Arc<Transaction>,
        leader: &dyn Fn(ItemId) -> SiteId,
        out: &mut Outbox,
    ) {
        if self.decision(txn.id).is_some() {
            return;
        }
        for o in &txn.ops {
            if self.map.replicates(self.site, o.item) && !self.delivered.contains_key(&o.id) {
                self.pending.insert(o.id);
            }
        }
        self.known.insert(txn.id, txn);
        self.leader_pump(leader, out);
    }

    /// TO-multicasts every pending operation whose group this site currently leads.
    pub fn leader_pump(&mut self, leader: &dyn Fn(ItemId) -> SiteId, out: &mut Outbox) {
        let ready: Vec<(OpId, ItemId, Arc<Transaction>)> = self
            .pending
            .iter()
            .filter(|o| !self.multicast.contains(o))
            .filter_map(|o| {
                let txn = self.known.get(&o.txn)?;
                let item = txn.op(*o)?.item;
                (leader(item) == self.site).then(|| (*o, item, txn.clone()))
            })
            .collect();
        for (op, item, txn) in ready {
            self.multicast.insert(op);
            out.sends.push(Outgoing::ToMcast { op, item, txn });
        }
    }

    // ----------------------------------------------------------------------
    // Certification

    /// TO-delivery of an operation. Only the first delivery of an operation id
    /// has any effect; returns whether this was it.
    pub fn on_to_deliver(&mut self, txn: Arc<Transaction>, op: OpId, out: &mut Outbox) -> bool {
        if self.delivered.contains_key(&op) {
            return false;
        }
        let txn = self.known.entry(txn.id).or_insert(txn).clone();
        let o = txn.op(op).expect("operation of its transaction").clone();
        self.pending.remove(&op);
        let log = self.delivery_log.entry(o.item).or_default();
        let position = log.len();
        log.push(op);
        self.delivered.insert(op, position);

        self.graph.add_vertex(txn.clone());
        self.graph.add_op(op).expect("vertex just added");

        // Conflicting operations of other transactions delivered earlier on this item.
        let earlier: Vec<(Arc<Transaction>, Operation)> = self.delivery_log[&o.item][..position]
            .iter()
            .filter(|p| p.txn != op.txn)
            .map(|p| {
                let t = self.known[&p.txn].clone();
                let po = t.op(*p).expect("logged operation").clone();
                (t, po)
            })
            .filter(|(_, po)| conflict(po, &o))
            .collect();

        if o.is_read() {
            // Any earlier concurrent write means the read may have missed it.
            if earlier.iter().any(|(t, _)| concurrent(t, &txn)) {
                self.graph.set_aborted(txn.id).expect("vertex present");
                out.trace.push(TraceEvent::SetAborted { site: self.site, txn: txn.id, op });
            }
            for (t, _) in &earlier {
                self.graph.add_edge(t.id, txn.id).expect("both vertices present");
            }
        } else {
            let forced = self.locks.force_write_lock(o.item, op);
            for victim in forced.victims {
                out.trace.push(TraceEvent::ForceLockAbort { site: self.site, item: o.item, op, victim });
                self.abort_execution(victim, LocalAbortReason::ForceLock, out);
            }
            for (t, _) in &earlier {
                self.graph.add_edge(t.id, txn.id).expect("both vertices present");
            }
        }

        let preds = Arc::new(self.graph.predecessors(txn.id).expect("vertex present"));
        let targets =
            replicas_of(&self.map, &self.graph, &self.graph.out_neighbors(txn.id).expect("vertex present"));
        for to in targets {
            out.sends.push(Outgoing::Graph { to, subject: txn.id, graph: preds.clone(), relay: false });
        }
        self.try_commit(out);
        true
    }

    // ----------------------------------------------------------------------
    // Closure

    pub fn on_receive_graph(
        &mut self,
        incoming: &PrecedenceGraph,
        out: &mut Outbox,
    ) -> Result<bool, GraphError> {
        incoming.validate()?;
        if incoming.is_subset(&self.graph) {
            return Ok(false);
        }
        let merged = self.graph.union(incoming);
        // Vertices whose own annotations or in-edges are new here.
        let mut changed: BTreeSet<TxnId> = incoming
            .vertices()
            .filter(|(t, v)| match self.graph.vertex(**t) {
                None => true,
                Some(mine) => (v.aborted && !mine.aborted) || !v.ops.is_subset(&mine.ops),
            })
            .map(|(t, _)| *t)
            .collect();
        changed.extend(incoming.edges().filter(|(a, b)| !self.graph.has_edge(*a, *b)).map(|(_, b)| b));
        // Every descendant of a changed vertex has a larger predecessor graph now;
        // pass it on to the replicas of its successors.
        let mut grown = changed.clone();
        let mut work: Vec<TxnId> = changed.into_iter().collect();
        while let Some(v) = work.pop() {
            for s in merged.direct_successors(v) {
                if grown.insert(s) {
                    work.push(s);
                }
            }
        }
        for t in grown {
            let successors: BTreeSet<TxnId> = merged.direct_successors(t).filter(|s| *s != t).collect();
            if successors.is_empty() {
                continue;
            }
            let preds = Arc::new(merged.predecessors(t)?);
            for to in replicas_of(&self.map, &merged, &successors) {
                out.sends.push(Outgoing::Graph { to, subject: t, graph: preds.clone(), relay: true });
            }
        }
        for (t, v) in incoming.vertices() {
            self.known.entry(*t).or_insert_with(|| v.txn.clone());
        }
        self.graph = merged;
        self.try_commit(out);
        Ok(true)
    }

    // ----------------------------------------------------------------------
    // Commitment

    fn local_writes<'a>(&self, t: &'a Transaction) -> impl Iterator<Item = &'a Operation> + 'a {
        let map = self.map.clone();
        let site = self.site;
        t.writes().filter(move |w| map.replicates(site, w.item))
    }

    fn undecided_local_writer(&self, t: TxnId) -> bool {
        self.decision(t).is_none()
            && self
                .graph
                .vertex(t)
                .is_some_and(|v| self.local_writes(&v.txn).next().is_some())
    }

    /// All local writes were TO-delivered here, hence hold their IW locks.
    fn holds_iw_locks(&self, t: &Transaction) -> bool {
        self.local_writes(t).all(|w| {
            self.delivered.contains_key(&w.id)
                && self.locks.mode_held(w.item, w.id) == Some(LockMode::IW)
        })
    }

    /// Decides every transaction whose commit guard holds.
    ///
    /// Among enabled transactions, a transaction is decided only after every
    /// undecided predecessor that also writes an item of this site, unless the
    /// two lie on a common cycle; such groups are decided together.
    pub fn try_commit(&mut self, out: &mut Outbox) {
        loop {
            let closed = self.graph.closed_vertices();
            let mut progressed = false;
            for t in closed.iter().copied() {
                if !self.undecided_local_writer(t) {
                    continue;
                }
                let ancestors = self.graph.ancestors(t).expect("vertex present");
                let mut batch = vec![t];
                let mut blocked = false;
                for u in ancestors.iter().copied().filter(|u| *u != t) {
                    if !self.undecided_local_writer(u) {
                        continue;
                    }
                    let same_component =
                        self.graph.ancestors(u).expect("vertex present").contains(&t);
                    if !same_component {
                        blocked = true;
                        break;
                    }
                    batch.push(u);
                }
                if blocked {
                    continue;
                }
                let ready = batch.iter().all(|b| {
                    let v = self.graph.vertex(*b).expect("vertex present");
                    self.holds_iw_locks(&v.txn)
                });
                if !ready {
                    continue;
                }
                let preds = self.graph.predecessors(t).expect("vertex present");
                batch.sort();
                let mut verdicts = Vec::new();
                for b in &batch {
                    let verdict = if preds.is_aborted(*b) {
                        Err(AbortReason::OutdatedRead)
                    } else {
                        match preds.decide(*b, self.config.cycle_cap) {
                            Ok(true) => Ok(()),
                            Ok(false) => Err(AbortReason::Cycle),
                            Err(e) => {
                                out.trace.push(TraceEvent::ProtocolError {
                                    site: self.site,
                                    detail: format!("deciding {b}: {e}"),
                                });
                                Err(AbortReason::Cycle)
                            }
                        }
                    };
                    verdicts.push((*b, verdict));
                }
                self.apply_decisions(verdicts, out);
                progressed = true;
                break;
            }
            if !progressed {
                break;
            }
        }
    }

    fn apply_decisions(&mut self, verdicts: Vec<(TxnId, Result<(), AbortReason>)>, out: &mut Outbox) {
        // Writes of the committing transactions, in delivery order per item.
        let mut writes: Vec<(ItemId, usize, Operation)> = Vec::new();
        for (t, v) in &verdicts {
            if v.is_ok() {
                let txn = self.graph.vertex(*t).expect("vertex present").txn.clone();
                for w in self.local_writes(&txn) {
                    writes.push((w.item, self.delivered[&w.id], w.clone()));
                }
            }
        }
        writes.sort_by_key(|(item, pos, _)| (*item, *pos));
        for (t, v) in &verdicts {
            match v {
                Ok(()) => {
                    self.committed.insert(*t);
                    out.trace.push(TraceEvent::TxnCommit { site: self.site, txn: *t, read_only: false });
                }
                Err(reason) => {
                    self.aborted.insert(*t);
                    self.pending.retain(|o| o.txn != *t);
                    out.trace.push(TraceEvent::TxnAbort { site: self.site, txn: *t, reason: *reason });
                }
            }
        }
        for (item, pos, w) in writes {
            let version = self.db.entry(item).or_default();
            // A later write of an already committed transaction wins.
            if version.position.is_some_and(|p| p > pos) {
                out.trace.push(TraceEvent::ValueSkipped { site: self.site, txn: w.txn(), op: w.id, item });
            } else {
                *version = Version {
                    value: w.value().expect("write").clone(),
                    writer: Some(w.txn()),
                    position: Some(pos),
                };
                out.trace.push(TraceEvent::ValueApplied { site: self.site, txn: w.txn(), op: w.id, item });
            }
        }
        let mut grants = Vec::new();
        for (t, _) in &verdicts {
            grants.extend(self.locks.release_txn(*t));
        }
        self.resume_granted(grants, out);
    }

    /// Drops all executing transactions (used when the site crashes).
    pub fn crash(&mut self) -> Vec<TxnId> {
        let lost: Vec<TxnId> = self.executing.keys().copied().collect();
        self.executing.clear();
        lost
    }
}

fn replicas_of(map: &ReplicationMap, g: &PrecedenceGraph, txns: &BTreeSet<TxnId>) -> BTreeSet<SiteId> {
    txns.iter()
        .filter_map(|t| g.vertex(*t))
        .flat_map(|v| map.replicas_of_txn(&v.txn))
        .collect()
}
