//! Post-hoc checking of run traces.
//!
//! Safety is judged from a multiversion serialization graph rebuilt from the
//! trace alone (delivery order, decisions and the version each read observed);
//! the protocol's own precedence graphs are only consulted for the closure
//! check at quiescence. The checker also audits the communication primitives and
//! accounts for messages and commit latency.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::Serialize;

use crate::graph::PrecedenceGraph;
use crate::model::{ItemId, OpId, SiteId, Transaction, TxnId};
use crate::trace::{MsgClass, MsgId, Trace, TraceEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationClass {
    OrderDisagreement,
    DanglingRead,
    NotSerializable,
    Undecided,
    DecisionDisagreement,
    DoubleDecision,
    MissingDelivery,
    NotClosed,
    UrmIntegrity,
    UrmAgreement,
    TotalOrder,
    LeaderUnstable,
    Incomplete,
    ProtocolError,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub class: ViolationClass,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.class, self.detail)
    }
}

fn violation(class: ViolationClass, detail: impl Into<String>) -> Violation {
    Violation { class, detail: detail.into() }
}

/// Per item, committed writes in version order.
pub type VersionOrder = BTreeMap<ItemId, Vec<OpId>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    ReadFrom,
    VersionOrder,
}

/// Multiversion serialization graph over committed transactions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Mvsg {
    pub vertices: BTreeSet<TxnId>,
    pub edges: BTreeMap<(TxnId, TxnId), BTreeSet<EdgeKind>>,
}

impl Mvsg {
    fn add_edge(&mut self, a: TxnId, b: TxnId, kind: EdgeKind) {
        if a != b {
            self.edges.entry((a, b)).or_default().insert(kind);
        }
    }

    /// Some cycle, as a vertex sequence, if the graph has one.
    pub fn find_cycle(&self) -> Option<Vec<TxnId>> {
        let mut succ: BTreeMap<TxnId, Vec<TxnId>> = BTreeMap::new();
        for (a, b) in self.edges.keys() {
            succ.entry(*a).or_default().push(*b);
        }
        // 0 = unvisited, 1 = on the current path, 2 = finished.
        let mut state: BTreeMap<TxnId, u8> = BTreeMap::new();
        for &root in &self.vertices {
            if state.get(&root).copied().unwrap_or(0) != 0 {
                continue;
            }
            let mut path = vec![root];
            let mut iters = vec![0usize];
            state.insert(root, 1);
            while let Some(&v) = path.last() {
                let i = iters.last_mut().expect("frame");
                let next = succ.get(&v).and_then(|s| s.get(*i)).copied();
                *i += 1;
                match next {
                    None => {
                        state.insert(v, 2);
                        path.pop();
                        iters.pop();
                    }
                    Some(w) => match state.get(&w).copied().unwrap_or(0) {
                        0 => {
                            state.insert(w, 1);
                            path.push(w);
                            iters.push(0);
                        }
                        1 => {
                            let start = path.iter().position(|p| *p == w).expect("on path");
                            return Some(path[start..].to_vec());
                        }
                        _ => {}
                    },
                }
            }
        }
        None
    }
}

/// Facts extracted from a trace.
#[derive(Debug, Default)]
pub struct TraceFacts {
    pub sites: BTreeSet<SiteId>,
    pub placement: BTreeMap<ItemId, BTreeSet<SiteId>>,
    pub crashed: BTreeSet<SiteId>,
    pub submitted: BTreeMap<TxnId, Transaction>,
    pub rmcast_time: BTreeMap<TxnId, u64>,
    pub urm: BTreeMap<MsgId, (SiteId, BTreeSet<SiteId>, TxnId)>,
    pub r_delivered: BTreeMap<MsgId, Vec<SiteId>>,
    /// Per (site, item): TO-deliveries in order, with the first-delivery flag.
    pub deliveries: BTreeMap<(SiteId, ItemId), Vec<(MsgId, OpId, bool)>>,
    /// Decisions per transaction and site, in trace order.
    pub decisions: BTreeMap<TxnId, Vec<(SiteId, bool, u64)>>,
    pub read_only: BTreeSet<TxnId>,
    /// Reads observed during initial execution: reader op, item, writer seen.
    pub reads: BTreeMap<TxnId, Vec<(OpId, ItemId, Option<TxnId>)>>,
    pub final_graphs: BTreeMap<SiteId, PrecedenceGraph>,
    pub final_leaders: BTreeMap<SiteId, BTreeMap<ItemId, SiteId>>,
    pub protocol_errors: Vec<(SiteId, String)>,
    pub ended: bool,
}

impl TraceFacts {
    pub fn from_trace(trace: &Trace) -> Self {
        let mut f = TraceFacts::default();
        for r in &trace.records {
            match &r.event {
                TraceEvent::Scenario { sites, placement, crashes, .. } => {
                    f.sites = sites.clone();
                    f.placement = placement.clone();
                    f.crashed.extend(crashes.iter().map(|(s, _)| *s));
                }
                TraceEvent::Crash { site } => {
                    f.crashed.insert(*site);
                }
                TraceEvent::RMcast { site, msg, members, txn } => {
                    f.submitted.insert(txn.id, txn.clone());
                    f.rmcast_time.insert(txn.id, r.time);
                    f.urm.insert(*msg, (*site, members.clone(), txn.id));
                }
                TraceEvent::RDeliver { site, msg, .. } => {
                    f.r_delivered.entry(*msg).or_default().push(*site);
                }
                TraceEvent::ToDeliver { site, msg, op, item, first, .. } => {
                    f.deliveries.entry((*site, *item)).or_default().push((*msg, *op, *first));
                }
                TraceEvent::TxnCommit { site, txn, read_only } => {
                    f.decisions.entry(*txn).or_default().push((*site, true, r.time));
                    if *read_only {
                        f.read_only.insert(*txn);
                    }
                }
                TraceEvent::TxnAbort { site, txn, .. } => {
                    f.decisions.entry(*txn).or_default().push((*site, false, r.time));
                }
                TraceEvent::TxnRead { txn, op, item, writer, .. } => {
                    f.reads.entry(*txn).or_default().push((*op, *item, *writer));
                }
                TraceEvent::FinalState { site, leaders, graph } => {
                    f.final_graphs.insert(*site, graph.clone());
                    f.final_leaders.insert(*site, leaders.clone());
                }
                TraceEvent::ProtocolError { site, detail } => {
                    f.protocol_errors.push((*site, detail.clone()));
                }
                TraceEvent::End { .. } => f.ended = true,
                _ => {}
            }
        }
        f
    }

    pub fn correct(&self) -> BTreeSet<SiteId> {
        self.sites.difference(&self.crashed).copied().collect()
    }

    fn replicas(&self, x: ItemId) -> BTreeSet<SiteId> {
        self.placement.get(&x).cloned().unwrap_or_default()
    }

    /// Transactions committed at some site.
    pub fn committed(&self) -> BTreeSet<TxnId> {
        self.decisions
            .iter()
            .filter(|(_, ds)| ds.iter().any(|(_, c, _)| *c))
            .map(|(t, _)| *t)
            .collect()
    }

    fn write_item(&self, op: OpId) -> Option<ItemId> {
        let o = self.submitted.get(&op.txn)?.op(op)?;
        o.is_write().then_some(o.item)
    }
}

/// Per item, committed writes ordered by first delivery, checked for agreement
/// between replicas.
pub fn build_version_order(facts: &TraceFacts) -> Result<VersionOrder, Vec<Violation>> {
    let committed = facts.committed();
    let mut per_item: BTreeMap<ItemId, Vec<(SiteId, Vec<OpId>)>> = BTreeMap::new();
    for ((site, item), log) in &facts.deliveries {
        let writes: Vec<OpId> = log
            .iter()
            .filter(|(_, op, first)| {
                *first && committed.contains(&op.txn) && facts.write_item(*op).is_some()
            })
            .map(|(_, op, _)| *op)
            .collect();
        per_item.entry(*item).or_default().push((*site, writes));
    }
    let mut errors = Vec::new();
    let mut order = VersionOrder::new();
    for (item, lists) in per_item {
        // before[(a, b)] = a site that delivered a before b.
        let mut before: BTreeMap<(OpId, OpId), SiteId> = BTreeMap::new();
        let mut all = BTreeSet::new();
        for (site, list) in &lists {
            for (i, a) in list.iter().enumerate() {
                all.insert(*a);
                for b in &list[i + 1..] {
                    if let Some(other) = before.get(&(*b, *a)) {
                        errors.push(violation(
                            ViolationClass::OrderDisagreement,
                            format!("{item}: {other} delivered {b} before {a}, {site} the reverse"),
                        ));
                    }
                    before.entry((*a, *b)).or_insert(*site);
                }
            }
        }
        // Kahn's algorithm, smallest id first among unconstrained writes.
        let mut indeg: BTreeMap<OpId, usize> = all.iter().map(|o| (*o, 0)).collect();
        for (_, b) in before.keys() {
            *indeg.get_mut(b).expect("known op") += 1;
        }
        let mut ready: BTreeSet<OpId> = indeg.iter().filter(|(_, d)| **d == 0).map(|(o, _)| *o).collect();
        let mut seq = Vec::new();
        while let Some(o) = ready.pop_first() {
            seq.push(o);
            for ((a, b), _) in before.range((o, OpId::new(TxnId(0), 0))..) {
                if *a != o {
                    break;
                }
                let d = indeg.get_mut(b).expect("known op");
                *d -= 1;
                if *d == 0 {
                    ready.insert(*b);
                }
            }
        }
        order.insert(item, seq);
    }
    if errors.is_empty() {
        Ok(order)
    } else {
        Err(errors)
    }
}

/// Builds the multiversion serialization graph of the committed transactions.
pub fn build_mvsg(facts: &TraceFacts, vo: &VersionOrder) -> Result<Mvsg, Vec<Violation>> {
    let committed = facts.committed();
    let mut g = Mvsg { vertices: committed.clone(), ..Mvsg::default() };
    let mut errors = Vec::new();
    for ops in vo.values() {
        for w in ops.windows(2) {
            g.add_edge(w[0].txn, w[1].txn, EdgeKind::VersionOrder);
        }
    }
    for (reader, reads) in &facts.reads {
        if !committed.contains(reader) {
            continue;
        }
        for (op, item, writer) in reads {
            if *writer == Some(*reader) {
                continue;
            }
            let versions = vo.get(item).map(Vec::as_slice).unwrap_or(&[]);
            // Index of the first version the reader did not see.
            let next = match writer {
                None => 0,
                Some(w) => {
                    let Some(pos) = versions.iter().rposition(|v| v.txn == *w) else {
                        errors.push(violation(
                            ViolationClass::DanglingRead,
                            format!("{op} read {item} from {w}, which has no committed write of it"),
                        ));
                        continue;
                    };
                    g.add_edge(*w, *reader, EdgeKind::ReadFrom);
                    pos + 1
                }
            };
            if let Some(later) = versions.get(next) {
                g.add_edge(*reader, later.txn, EdgeKind::VersionOrder);
            }
        }
    }
    if errors.is_empty() {
        Ok(g)
    } else {
        Err(errors)
    }
}

pub fn assert_serializable(g: &Mvsg) -> Result<(), Violation> {
    match g.find_cycle() {
        None => Ok(()),
        Some(c) => {
            let s: Vec<String> = c.iter().map(ToString::to_string).collect();
            Err(violation(ViolationClass::NotSerializable, format!("cycle {}", s.join(" -> "))))
        }
    }
}

/// Decisions, delivery of every operation at its correct replicas and closure
/// of the final graphs.
pub fn assert_liveness_and_agreement(facts: &TraceFacts) -> Vec<Violation> {
    let mut out = Vec::new();
    let correct = facts.correct();
    if !facts.ended {
        out.push(violation(ViolationClass::Incomplete, "trace has no end record"));
    }
    for (t, ds) in &facts.decisions {
        let mut seen: BTreeMap<SiteId, bool> = BTreeMap::new();
        for (s, c, _) in ds {
            if seen.insert(*s, *c).is_some() {
                out.push(violation(ViolationClass::DoubleDecision, format!("{t} decided twice at {s}")));
            }
        }
        let commit = seen.iter().find(|(_, c)| **c);
        let abort = seen.iter().find(|(_, c)| !**c);
        if let (Some((a, _)), Some((b, _))) = (commit, abort) {
            out.push(violation(
                ViolationClass::DecisionDisagreement,
                format!("{t} committed at {a} but aborted at {b}"),
            ));
        }
    }
    for (t, txn) in &facts.submitted {
        let deciders: BTreeSet<SiteId> =
            txn.writes().flat_map(|w| facts.replicas(w.item)).collect();
        let decided: BTreeSet<SiteId> =
            facts.decisions.get(t).into_iter().flatten().map(|(s, _, _)| *s).collect();
        for s in deciders.intersection(&correct) {
            if !decided.contains(s) {
                out.push(violation(ViolationClass::Undecided, format!("{t} undecided at {s}")));
            }
        }
        for o in &txn.ops {
            for s in facts.replicas(o.item).intersection(&correct) {
                let delivered = facts
                    .deliveries
                    .get(&(*s, o.item))
                    .is_some_and(|log| log.iter().any(|(_, op, _)| *op == o.id));
                if !delivered {
                    out.push(violation(
                        ViolationClass::MissingDelivery,
                        format!("{} never TO-delivered at {s}", o.id),
                    ));
                }
            }
        }
    }
    for (s, g) in &facts.final_graphs {
        for t in open_vertices(g) {
            out.push(violation(ViolationClass::NotClosed, format!("{t} is not closed at {s}")));
        }
    }
    for (s, d) in &facts.protocol_errors {
        out.push(violation(ViolationClass::ProtocolError, format!("{s}: {d}")));
    }
    out
}

/// Vertices that are not closed, by a direct fixed-point computation.
fn open_vertices(g: &PrecedenceGraph) -> BTreeSet<TxnId> {
    let mut open: BTreeSet<TxnId> = g
        .vertices()
        .filter(|(_, v)| v.ops.len() != v.txn.ops.len())
        .map(|(t, _)| *t)
        .collect();
    loop {
        let grown: Vec<TxnId> = g
            .edges()
            .filter(|(a, b)| open.contains(a) && !open.contains(b))
            .map(|(_, b)| b)
            .collect();
        if grown.is_empty() {
            return open;
        }
        open.extend(grown);
    }
}

/// Contracts of the multicast primitives and of the leader oracle.
pub fn assert_primitives(facts: &TraceFacts) -> Vec<Violation> {
    let mut out = Vec::new();
    let correct = facts.correct();
    for (msg, sites) in &facts.r_delivered {
        let Some((_, members, _)) = facts.urm.get(msg) else {
            out.push(violation(ViolationClass::UrmIntegrity, format!("message {msg} delivered but never sent")));
            continue;
        };
        let mut seen = BTreeSet::new();
        for s in sites {
            if !seen.insert(*s) {
                out.push(violation(ViolationClass::UrmIntegrity, format!("message {msg} delivered twice at {s}")));
            }
            if !members.contains(s) {
                out.push(violation(ViolationClass::UrmIntegrity, format!("message {msg} delivered at non-member {s}")));
            }
        }
        for m in members.intersection(&correct) {
            if !seen.contains(m) {
                out.push(violation(ViolationClass::UrmAgreement, format!("message {msg} not delivered at {m}")));
            }
        }
    }
    for (msg, (sender, members, _)) in &facts.urm {
        if correct.contains(sender) && !facts.r_delivered.contains_key(msg) && !members.is_empty() {
            out.push(violation(ViolationClass::UrmAgreement, format!("message {msg} from correct {sender} never delivered")));
        }
    }
    // Total order: any two sites deliver their common messages in the same order,
    // and a correct site delivers everything that precedes a message it delivered.
    let mut by_item: BTreeMap<ItemId, Vec<(SiteId, &Vec<(MsgId, OpId, bool)>)>> = BTreeMap::new();
    for ((s, x), log) in &facts.deliveries {
        by_item.entry(*x).or_default().push((*s, log));
    }
    for (x, logs) in by_item {
        let mut pos: Vec<(SiteId, BTreeMap<MsgId, usize>)> = Vec::new();
        for (s, log) in &logs {
            let mut p = BTreeMap::new();
            for (i, (m, _, _)) in log.iter().enumerate() {
                if p.insert(*m, i).is_some() {
                    out.push(violation(ViolationClass::TotalOrder, format!("message {m} delivered twice at {s} on {x}")));
                }
            }
            pos.push((*s, p));
        }
        'pairs: for (i, (sa, pa)) in pos.iter().enumerate() {
            for (sb, pb) in &pos[i + 1..] {
                let mut common: Vec<(usize, usize)> =
                    pa.iter().filter_map(|(m, ia)| pb.get(m).map(|ib| (*ia, *ib))).collect();
                common.sort();
                if common.windows(2).any(|w| w[0].1 > w[1].1) {
                    out.push(violation(
                        ViolationClass::TotalOrder,
                        format!("{sa} and {sb} deliver messages on {x} in different orders"),
                    ));
                    continue 'pairs;
                }
            }
        }
        for (s, p) in &pos {
            if !correct.contains(s) {
                continue;
            }
            for (o, po) in &pos {
                if let Some(missing) = po.keys().find(|m| !p.contains_key(m)) {
                    out.push(violation(
                        ViolationClass::TotalOrder,
                        format!("{o} delivered message {missing} on {x} but correct {s} did not"),
                    ));
                    break;
                }
            }
        }
    }
    // Leader: every group with a correct member ends with a correct member that
    // considers itself the leader.
    for (x, reps) in &facts.placement {
        let live: BTreeSet<SiteId> = reps.intersection(&correct).copied().collect();
        if live.is_empty() || facts.final_leaders.is_empty() {
            continue;
        }
        let stable = live.iter().any(|s| {
            facts.final_leaders.get(s).and_then(|l| l.get(x)) == Some(s)
        });
        if !stable {
            out.push(violation(ViolationClass::LeaderUnstable, format!("no correct replica of {x} leads itself")));
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TxnMetrics {
    pub urm: u64,
    pub tom: u64,
    pub graph: u64,
    pub relay: u64,
    /// Re-sent after a crash or a leadership change; excluded from the totals above.
    pub failover: u64,
    pub total: u64,
    /// Time from submission to the last commit of the transaction.
    pub critical_path: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MetricsReport {
    pub per_txn: BTreeMap<TxnId, TxnMetrics>,
}

pub fn account_messages(trace: &Trace) -> MetricsReport {
    let facts = TraceFacts::from_trace(trace);
    let mut per_txn: BTreeMap<TxnId, TxnMetrics> = BTreeMap::new();
    for t in facts.submitted.keys() {
        per_txn.insert(*t, TxnMetrics::default());
    }
    for ev in trace.events() {
        if let TraceEvent::Send { txn, class, failover, .. } = ev {
            let Some(m) = per_txn.get_mut(txn) else { continue };
            if *failover {
                m.failover += 1;
                continue;
            }
            match class {
                MsgClass::UrmData | MsgClass::UrmEcho => m.urm += 1,
                MsgClass::TomPropose | MsgClass::TomOrder => m.tom += 1,
                MsgClass::Graph => m.graph += 1,
                MsgClass::GraphRelay => m.relay += 1,
            }
        }
    }
    for (t, m) in &mut per_txn {
        m.total = m.urm + m.tom + m.graph + m.relay;
        let last_commit = facts
            .decisions
            .get(t)
            .into_iter()
            .flatten()
            .filter(|(_, c, _)| *c)
            .map(|(_, _, time)| *time)
            .max();
        m.critical_path = last_commit.map(|c| c - facts.rmcast_time[t]);
    }
    MetricsReport { per_txn }
}

impl TxnMetrics {
    /// Compares the counts of a conflict-free, stable-leader transaction with
    /// `o` operations on items replicated `d` times against the closed forms.
    /// Returns the failed comparisons.
    pub fn check_bounds(&self, o: u64, d: u64) -> Vec<String> {
        let od = o * d;
        let mut bad = Vec::new();
        if self.urm != 2 * od {
            bad.push(format!("urm {} != 2od = {}", self.urm, 2 * od));
        }
        if self.tom != 2 * d * o {
            bad.push(format!("tom {} != 2d per op = {}", self.tom, 2 * d * o));
        }
        if self.graph > od * od {
            bad.push(format!("graph {} > (od)^2 = {}", self.graph, od * od));
        }
        if self.total > 5 * od + od * od {
            bad.push(format!("total {} > 5od+(od)^2 = {}", self.total, 5 * od + od * od));
        }
        bad
    }
}

impl MetricsReport {
    pub fn render(&self) -> String {
        let mut s = String::from("txn      urm   tom  graph  relay  failover  total  critical_path\n");
        for (t, m) in &self.per_txn {
            let cp = m.critical_path.map(|c| c.to_string()).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                s,
                "{:<8} {:>4} {:>5} {:>6} {:>6} {:>9} {:>6} {:>14}",
                t.to_string(),
                m.urm,
                m.tom,
                m.graph,
                m.relay,
                m.failover,
                m.total,
                cp
            );
        }
        s
    }
}

/// Outcome of every check on one trace.
#[derive(Debug, Clone, Default, Serialize)]
pub struct CheckReport {
    pub committed: usize,
    pub aborted: usize,
    pub violations: Vec<Violation>,
    #[serde(skip)]
    pub mvsg: Mvsg,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, class: ViolationClass) -> bool {
        self.violations.iter().any(|v| v.class == class)
    }

    pub fn render(&self) -> String {
        let groups: [(&str, &[ViolationClass]); 5] = [
            ("version order", &[ViolationClass::OrderDisagreement]),
            ("serializability", &[ViolationClass::DanglingRead, ViolationClass::NotSerializable]),
            (
                "liveness",
                &[
                    ViolationClass::Undecided,
                    ViolationClass::MissingDelivery,
                    ViolationClass::NotClosed,
                    ViolationClass::Incomplete,
                    ViolationClass::ProtocolError,
                ],
            ),
            ("agreement", &[ViolationClass::DecisionDisagreement, ViolationClass::DoubleDecision]),
            (
                "primitives",
                &[
                    ViolationClass::UrmIntegrity,
                    ViolationClass::UrmAgreement,
                    ViolationClass::TotalOrder,
                    ViolationClass::LeaderUnstable,
                ],
            ),
        ];
        let mut s = String::new();
        for (name, classes) in groups {
            let failed: Vec<&Violation> =
                self.violations.iter().filter(|v| classes.contains(&v.class)).collect();
            let _ = writeln!(s, "{:<16} {}", name, if failed.is_empty() { "PASS" } else { "FAIL" });
            for v in failed {
                let _ = writeln!(s, "  {v}");
            }
        }
        let _ = writeln!(s, "committed {}  aborted {}", self.committed, self.aborted);
        s
    }
}

pub fn check(trace: &Trace) -> CheckReport {
    let facts = TraceFacts::from_trace(trace);
    let mut report = CheckReport::default();
    let committed = facts.committed();
    report.committed = committed.len();
    report.aborted = facts.decisions.keys().filter(|t| !committed.contains(t)).count();
    let vo = match build_version_order(&facts) {
        Ok(vo) => Some(vo),
        Err(e) => {
            report.violations.extend(e);
            None
        }
    };
    if let Some(vo) = vo {
        match build_mvsg(&facts, &vo) {
            Ok(g) => {
                if let Err(v) = assert_serializable(&g) {
                    report.violations.push(v);
                }
                report.mvsg = g;
            }
            Err(e) => report.violations.extend(e),
        }
    }
    report.violations.extend(assert_liveness_and_agreement(&facts));
    report.violations.extend(assert_primitives(&facts));
    report
}
