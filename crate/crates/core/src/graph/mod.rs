//! Precedence graphs: the distributed, partially known record of ordering
//! constraints between transactions.
//!
//! A vertex carries the transaction itself, an aborted flag and the subset of the
//! transaction's operations that the holder of the graph has learnt about. An edge
//! `(A, B)` says that some operation of `A` was TO-delivered before a conflicting
//! operation of `B` on the same item.
//!
//! Graphs have value semantics. Canonical serialization orders vertices by
//! transaction id, edges lexicographically and operation subsets by operation id,
//! so equal graphs serialize to identical bytes.

mod cycles;

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::model::{OpId, Transaction, TxnId};

pub use cycles::{break_cycles, Digraph, DEFAULT_CYCLE_CAP};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("transaction {0} is not a vertex of the graph")]
    VertexAbsent(TxnId),
    #[error("more than {cap} elementary cycles")]
    CycleBudgetExceeded { cap: usize },
    #[error("malformed graph: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone)]
pub struct Vertex {
    pub txn: Arc<Transaction>,
    pub aborted: bool,
    pub ops: BTreeSet<OpId>,
}

impl Vertex {
    /// `opg(T, G) = T`: every operation of the transaction is known.
    pub fn is_complete(&self) -> bool {
        self.ops.len() == self.txn.ops.len()
    }
}

impl PartialEq for Vertex {
    fn eq(&self, other: &Self) -> bool {
        self.txn.id == other.txn.id && self.aborted == other.aborted && self.ops == other.ops
    }
}

impl Eq for Vertex {}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PrecedenceGraph {
    vertices: BTreeMap<TxnId, Vertex>,
    edges: BTreeSet<(TxnId, TxnId)>,
    // Mirror of `edges` with endpoints swapped, for in-neighbour lookups.
    reverse: BTreeSet<(TxnId, TxnId)>,
}

fn range_of(v: TxnId) -> std::ops::RangeInclusive<(TxnId, TxnId)> {
    (v, TxnId(u64::MIN))..=(v, TxnId(u64::MAX))
}

impl PrecedenceGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn contains(&self, t: TxnId) -> bool {
        self.vertices.contains_key(&t)
    }

    pub fn vertex(&self, t: TxnId) -> Option<&Vertex> {
        self.vertices.get(&t)
    }

    pub fn vertices(&self) -> impl Iterator<Item = (&TxnId, &Vertex)> {
        self.vertices.iter()
    }

    pub fn txn_ids(&self) -> impl Iterator<Item = TxnId> + '_ {
        self.vertices.keys().copied()
    }

    pub fn edges(&self) -> impl Iterator<Item = (TxnId, TxnId)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, a: TxnId, b: TxnId) -> bool {
        self.edges.contains(&(a, b))
    }

    pub fn is_aborted(&self, t: TxnId) -> bool {
        self.vertices.get(&t).is_some_and(|v| v.aborted)
    }

    /// Adds `txn` as a vertex with no known operations, if absent.
    pub fn add_vertex(&mut self, txn: Arc<Transaction>) {
        self.vertices
            .entry(txn.id)
            .or_insert_with(|| Vertex { txn, aborted: false, ops: BTreeSet::new() });
    }

    pub fn add_op(&mut self, op: OpId) -> Result<(), GraphError> {
        let v = self.vertices.get_mut(&op.txn).ok_or(GraphError::VertexAbsent(op.txn))?;
        if v.txn.op(op).is_none() {
            return Err(GraphError::Malformed(format!("{op} is not an operation of {}", op.txn)));
        }
        v.ops.insert(op);
        Ok(())
    }

    pub fn set_aborted(&mut self, t: TxnId) -> Result<(), GraphError> {
        self.vertices.get_mut(&t).ok_or(GraphError::VertexAbsent(t))?.aborted = true;
        Ok(())
    }

    pub fn add_edge(&mut self, from: TxnId, to: TxnId) -> Result<(), GraphError> {
        for v in [from, to] {
            if !self.contains(v) {
                return Err(GraphError::VertexAbsent(v));
            }
        }
        self.edges.insert((from, to));
        self.reverse.insert((to, from));
        Ok(())
    }

    pub fn direct_predecessors(&self, t: TxnId) -> impl Iterator<Item = TxnId> + '_ {
        self.reverse.range(range_of(t)).map(|(_, p)| *p)
    }

    pub fn direct_successors(&self, t: TxnId) -> impl Iterator<Item = TxnId> + '_ {
        self.edges.range(range_of(t)).map(|(_, s)| *s)
    }

    /// `T` together with its direct predecessors.
    pub fn in_neighbors(&self, t: TxnId) -> Result<BTreeSet<TxnId>, GraphError> {
        self.require(t)?;
        Ok(std::iter::once(t).chain(self.direct_predecessors(t)).collect())
    }

    /// `T` together with its direct successors.
    pub fn out_neighbors(&self, t: TxnId) -> Result<BTreeSet<TxnId>, GraphError> {
        self.require(t)?;
        Ok(std::iter::once(t).chain(self.direct_successors(t)).collect())
    }

    /// Vertices from which `t` is reachable, `t` included.
    pub fn ancestors(&self, t: TxnId) -> Result<BTreeSet<TxnId>, GraphError> {
        self.require(t)?;
        let mut seen = BTreeSet::from([t]);
        let mut work = vec![t];
        while let Some(v) = work.pop() {
            for p in self.direct_predecessors(v) {
                if seen.insert(p) {
                    work.push(p);
                }
            }
        }
        Ok(seen)
    }

    /// The sub-graph induced by the ancestors of `t`.
    pub fn predecessors(&self, t: TxnId) -> Result<PrecedenceGraph, GraphError> {
        Ok(self.induced(&self.ancestors(t)?))
    }

    /// Sub-graph induced by `keep`, with flags and operation subsets preserved.
    pub fn induced(&self, keep: &BTreeSet<TxnId>) -> PrecedenceGraph {
        let mut g = PrecedenceGraph::new();
        for t in keep {
            if let Some(v) = self.vertices.get(t) {
                g.vertices.insert(*t, v.clone());
            }
        }
        for t in keep {
            for s in self.direct_successors(*t).filter(|s| keep.contains(s)) {
                g.edges.insert((*t, s));
                g.reverse.insert((s, *t));
            }
        }
        g
    }

    /// Merges `other` into `self`.
    pub fn merge(&mut self, other: &PrecedenceGraph) {
        for (t, v) in &other.vertices {
            match self.vertices.get_mut(t) {
                Some(mine) => {
                    mine.aborted |= v.aborted;
                    mine.ops.extend(v.ops.iter().copied());
                }
                None => {
                    self.vertices.insert(*t, v.clone());
                }
            }
        }
        self.edges.extend(other.edges.iter().copied());
        self.reverse.extend(other.reverse.iter().copied());
    }

    pub fn union(&self, other: &PrecedenceGraph) -> PrecedenceGraph {
        let mut g = self.clone();
        g.merge(other);
        g
    }

    /// `self ⊆ other`: vertices and edges contained, aborted flags implied,
    /// operation subsets contained.
    pub fn is_subset(&self, other: &PrecedenceGraph) -> bool {
        self.edges.is_subset(&other.edges)
            && self.vertices.iter().all(|(t, v)| match other.vertices.get(t) {
                Some(o) => (!v.aborted || o.aborted) && v.ops.is_subset(&o.ops),
                None => false,
            })
    }

    /// Every vertex that is closed: it knows all of its operations and all of its
    /// in-neighbours are closed. Computed as a greatest fixed point, so a cycle of
    /// complete vertices is closed.
    pub fn closed_vertices(&self) -> BTreeSet<TxnId> {
        let mut open: BTreeSet<TxnId> =
            self.vertices.iter().filter(|(_, v)| !v.is_complete()).map(|(t, _)| *t).collect();
        let mut work: VecDeque<TxnId> = open.iter().copied().collect();
        while let Some(v) = work.pop_front() {
            for s in self.direct_successors(v) {
                if open.insert(s) {
                    work.push_back(s);
                }
            }
        }
        self.vertices.keys().filter(|t| !open.contains(t)).copied().collect()
    }

    pub fn is_closed(&self, t: TxnId) -> Result<bool, GraphError> {
        self.require(t)?;
        // Only the ancestors matter.
        Ok(self.predecessors(t)?.closed_vertices().contains(&t))
    }

    pub fn digraph(&self) -> Digraph {
        Digraph::from_edges(self.txn_ids(), self.edges())
    }

    /// Commit decision for `t`, where `self` is `t`'s predecessor graph.
    ///
    /// Considers only cycles made entirely of non-aborted vertices and returns
    /// `false` iff the feedback-vertex-set heuristic picks `t`. Because cycles
    /// never leave a strongly connected component and the heuristic treats
    /// components independently, only `t`'s component is examined.
    pub fn decide(&self, t: TxnId, cycle_cap: usize) -> Result<bool, GraphError> {
        self.require(t)?;
        let live: BTreeSet<TxnId> =
            self.vertices.iter().filter(|(_, v)| !v.aborted).map(|(t, _)| *t).collect();
        if !live.contains(&t) {
            // An aborted vertex lies on no considered cycle.
            return Ok(true);
        }
        let g = self.digraph().induced(&live);
        let Some(comp) = g.cyclic_sccs().into_iter().find(|c| c.contains(&t)) else {
            return Ok(true);
        };
        let fvs = break_cycles(&g.induced(&comp), cycle_cap)?;
        Ok(!fvs.contains(&t))
    }

    /// Structural sanity: edge endpoints exist and operation subsets belong to
    /// their transaction.
    pub fn validate(&self) -> Result<(), GraphError> {
        for (a, b) in &self.edges {
            if !self.contains(*a) || !self.contains(*b) {
                return Err(GraphError::Malformed(format!("edge ({a}, {b}) has a missing endpoint")));
            }
        }
        for (t, v) in &self.vertices {
            if v.txn.id != *t {
                return Err(GraphError::Malformed(format!("vertex {t} carries {}", v.txn.id)));
            }
            if let Some(op) = v.ops.iter().find(|o| v.txn.op(**o).is_none()) {
                return Err(GraphError::Malformed(format!("{op} is not an operation of {t}")));
            }
        }
        Ok(())
    }

    fn require(&self, t: TxnId) -> Result<(), GraphError> {
        if self.contains(t) {
            Ok(())
        } else {
            Err(GraphError::VertexAbsent(t))
        }
    }
}

#[derive(Serialize, Deserialize)]
struct WireVertex {
    txn: Transaction,
    aborted: bool,
    ops: Vec<OpId>,
}

#[derive(Serialize, Deserialize)]
struct WireGraph {
    vertices: Vec<WireVertex>,
    edges: Vec<(TxnId, TxnId)>,
}

impl Serialize for PrecedenceGraph {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        WireGraph {
            vertices: self
                .vertices
                .values()
                .map(|v| WireVertex {
                    txn: (*v.txn).clone(),
                    aborted: v.aborted,
                    ops: v.ops.iter().copied().collect(),
                })
                .collect(),
            edges: self.edges.iter().copied().collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PrecedenceGraph {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let wire = WireGraph::deserialize(d)?;
        let mut g = PrecedenceGraph::new();
        for v in wire.vertices {
            let id = v.txn.id;
            g.vertices.insert(
                id,
                Vertex { txn: Arc::new(v.txn), aborted: v.aborted, ops: v.ops.into_iter().collect() },
            );
        }
        for (a, b) in wire.edges {
            g.edges.insert((a, b));
            g.reverse.insert((b, a));
        }
        g.validate().map_err(serde::de::Error::custom)?;
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ItemId, Operation, SiteId, Value};

    fn txn(id: u64, nops: u32) -> Arc<Transaction> {
        let ops = (0..nops)
            .map(|i| {
                Operation::write(OpId::new(TxnId(id), i), ItemId(i), Value::from_str_bytes("v"))
            })
            .collect();
        Arc::new(Transaction::new(TxnId(id), SiteId(0), 0, 1, ops, BTreeSet::new()).unwrap())
    }

    /// Graph whose vertices all know every operation.
    fn complete(vertices: &[u64], edges: &[(u64, u64)]) -> PrecedenceGraph {
        let mut g = PrecedenceGraph::new();
        for v in vertices {
            let t = txn(*v, 1);
            g.add_vertex(t.clone());
            g.add_op(t.ops[0].id).unwrap();
        }
        for (a, b) in edges {
            g.add_edge(TxnId(*a), TxnId(*b)).unwrap();
        }
        g
    }

    fn ids(v: &[u64]) -> BTreeSet<TxnId> {
        v.iter().map(|t| TxnId(*t)).collect()
    }

    #[test]
    fn union_examples() {
        let g = complete(&[1, 2], &[(1, 2)]);
        assert_eq!(g.union(&PrecedenceGraph::new()), g);

        let mut a = g.clone();
        a.set_aborted(TxnId(1)).unwrap();
        assert!(a.union(&g).is_aborted(TxnId(1)));
        assert!(g.union(&a).is_aborted(TxnId(1)));

        let t = txn(9, 2);
        let mut x = PrecedenceGraph::new();
        x.add_vertex(t.clone());
        x.add_op(t.ops[0].id).unwrap();
        let mut y = PrecedenceGraph::new();
        y.add_vertex(t.clone());
        y.add_op(t.ops[1].id).unwrap();
        let u = x.union(&y);
        assert_eq!(u.vertex(TxnId(9)).unwrap().ops, t.op_ids());
    }

    #[test]
    fn subset_examples() {
        let g = complete(&[1, 2], &[(1, 2)]);
        assert!(PrecedenceGraph::new().is_subset(&g));
        let mut a = g.clone();
        a.set_aborted(TxnId(2)).unwrap();
        assert!(!a.is_subset(&g));
        assert!(g.is_subset(&a));
        let h = complete(&[3], &[]);
        let u = g.union(&h);
        assert!(g.is_subset(&u) && h.is_subset(&u));
    }

    #[test]
    fn neighbor_examples() {
        let g = complete(&[1, 2, 3, 4], &[(2, 1), (1, 3), (1, 4)]);
        assert_eq!(complete(&[1], &[]).in_neighbors(TxnId(1)).unwrap(), ids(&[1]));
        assert_eq!(g.in_neighbors(TxnId(1)).unwrap(), ids(&[1, 2]));
        assert_eq!(g.out_neighbors(TxnId(1)).unwrap(), ids(&[1, 3, 4]));
        assert_eq!(g.in_neighbors(TxnId(7)), Err(GraphError::VertexAbsent(TxnId(7))));
    }

    #[test]
    fn predecessor_examples() {
        let g = complete(&[1, 2, 3], &[(1, 2), (2, 3)]);
        let p = g.predecessors(TxnId(3)).unwrap();
        assert_eq!(p.txn_ids().collect::<BTreeSet<_>>(), ids(&[1, 2, 3]));
        assert_eq!(p.edges().count(), 2);

        let g = complete(&[1], &[]);
        assert_eq!(g.predecessors(TxnId(1)).unwrap(), g);

        // Diamond plus an unrelated chain.
        let g = complete(&[1, 2, 3, 4, 5, 6], &[(1, 2), (2, 4), (1, 3), (3, 4), (5, 6)]);
        let p = g.predecessors(TxnId(4)).unwrap();
        assert_eq!(p.txn_ids().collect::<BTreeSet<_>>(), ids(&[1, 2, 3, 4]));
        assert_eq!(p.edges().count(), 4);
    }

    #[test]
    fn closure_examples() {
        assert!(complete(&[1], &[]).is_closed(TxnId(1)).unwrap());

        let t = txn(1, 2);
        let mut g = PrecedenceGraph::new();
        g.add_vertex(t.clone());
        g.add_op(t.ops[0].id).unwrap();
        assert!(!g.is_closed(TxnId(1)).unwrap());

        let g = complete(&[1, 2], &[(1, 2), (2, 1)]);
        assert!(g.is_closed(TxnId(1)).unwrap());
        assert!(g.is_closed(TxnId(2)).unwrap());

        // An incomplete ancestor keeps its descendants open.
        let mut g = complete(&[2, 3], &[]);
        g.add_vertex(t.clone());
        g.add_op(t.ops[0].id).unwrap();
        g.add_edge(TxnId(1), TxnId(2)).unwrap();
        g.add_edge(TxnId(2), TxnId(3)).unwrap();
        assert_eq!(g.closed_vertices(), BTreeSet::new());
    }

    #[test]
    fn decide_examples() {
        let g = complete(&[1, 2], &[(1, 2)]);
        assert!(g.decide(TxnId(2), DEFAULT_CYCLE_CAP).unwrap());

        let g = complete(&[1, 2], &[(1, 2), (2, 1)]);
        assert!(!g.decide(TxnId(1), DEFAULT_CYCLE_CAP).unwrap());
        assert!(g.decide(TxnId(2), DEFAULT_CYCLE_CAP).unwrap());

        let mut g = complete(&[1, 2], &[(1, 2), (2, 1)]);
        g.set_aborted(TxnId(2)).unwrap();
        assert!(g.decide(TxnId(1), DEFAULT_CYCLE_CAP).unwrap());
    }

    #[test]
    fn canonical_serialization_round_trip() {
        let mut g = complete(&[3, 1, 2], &[(2, 1), (1, 3)]);
        g.set_aborted(TxnId(2)).unwrap();
        let s = serde_json::to_string(&g).unwrap();
        let back: PrecedenceGraph = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
        assert_eq!(serde_json::to_string(&back).unwrap(), s);
    }

    #[test]
    fn malformed_graph_rejected() {
        let s = r#"{"vertices":[],"edges":[[1,2]]}"#;
        assert!(serde_json::from_str::<PrecedenceGraph>(s).is_err());
    }
}
