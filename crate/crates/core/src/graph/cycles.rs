//! Plain directed graphs over transactions: strongly connected components,
//! elementary-cycle enumeration and the feedback-vertex-set heuristic.

use std::collections::{BTreeMap, BTreeSet};

use crate::model::TxnId;

use super::GraphError;

/// Default bound on the number of elementary cycles enumerated per call.
pub const DEFAULT_CYCLE_CAP: usize = 10_000;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Digraph {
    adj: BTreeMap<TxnId, BTreeSet<TxnId>>,
}

impl Digraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_edges<I>(vertices: impl IntoIterator<Item = TxnId>, edges: I) -> Self
    where
        I: IntoIterator<Item = (TxnId, TxnId)>,
    {
        let mut g = Self::new();
        for v in vertices {
            g.add_vertex(v);
        }
        for (a, b) in edges {
            g.add_edge(a, b);
        }
        g
    }

    pub fn add_vertex(&mut self, v: TxnId) {
        self.adj.entry(v).or_default();
    }

    pub fn add_edge(&mut self, a: TxnId, b: TxnId) {
        self.add_vertex(b);
        self.adj.entry(a).or_default().insert(b);
    }

    pub fn vertices(&self) -> impl Iterator<Item = TxnId> + '_ {
        self.adj.keys().copied()
    }

    pub fn successors(&self, v: TxnId) -> impl Iterator<Item = TxnId> + '_ {
        self.adj.get(&v).into_iter().flatten().copied()
    }

    pub fn edges(&self) -> impl Iterator<Item = (TxnId, TxnId)> + '_ {
        self.adj.iter().flat_map(|(a, s)| s.iter().map(move |b| (*a, *b)))
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }

    /// Subgraph induced by `keep`.
    pub fn induced(&self, keep: &BTreeSet<TxnId>) -> Self {
        let mut g = Self::new();
        for v in keep.iter().filter(|v| self.adj.contains_key(v)) {
            g.add_vertex(*v);
            for w in self.successors(*v).filter(|w| keep.contains(w)) {
                g.add_edge(*v, w);
            }
        }
        g
    }

    pub fn without(&self, removed: &BTreeSet<TxnId>) -> Self {
        let keep = self.vertices().filter(|v| !removed.contains(v)).collect();
        self.induced(&keep)
    }

    /// Strongly connected components, each sorted, listed by smallest member.
    pub fn sccs(&self) -> Vec<BTreeSet<TxnId>> {
        // Iterative Tarjan.
        let ids: Vec<TxnId> = self.vertices().collect();
        let index_of: BTreeMap<TxnId, usize> = ids.iter().enumerate().map(|(i, v)| (*v, i)).collect();
        let succ: Vec<Vec<usize>> =
            ids.iter().map(|v| self.successors(*v).map(|w| index_of[&w]).collect()).collect();
        let n = ids.len();
        let mut index = vec![usize::MAX; n];
        let mut low = vec![0; n];
        let mut on_stack = vec![false; n];
        let mut stack = Vec::new();
        let mut next = 0;
        let mut out = Vec::new();
        for root in 0..n {
            if index[root] != usize::MAX {
                continue;
            }
            let mut call: Vec<(usize, usize)> = vec![(root, 0)];
            index[root] = next;
            low[root] = next;
            next += 1;
            stack.push(root);
            on_stack[root] = true;
            while let Some(&(v, i)) = call.last() {
                if i < succ[v].len() {
                    let w = succ[v][i];
                    call.last_mut().expect("frame").1 += 1;
                    if index[w] == usize::MAX {
                        index[w] = next;
                        low[w] = next;
                        next += 1;
                        stack.push(w);
                        on_stack[w] = true;
                        call.push((w, 0));
                    } else if on_stack[w] {
                        low[v] = low[v].min(index[w]);
                    }
                } else {
                    call.pop();
                    if let Some(&(parent, _)) = call.last() {
                        low[parent] = low[parent].min(low[v]);
                    }
                    if low[v] == index[v] {
                        let mut comp = BTreeSet::new();
                        loop {
                            let w = stack.pop().expect("tarjan stack");
                            on_stack[w] = false;
                            comp.insert(ids[w]);
                            if w == v {
                                break;
                            }
                        }
                        out.push(comp);
                    }
                }
            }
        }
        out.sort_by_key(|c| *c.iter().next().expect("non-empty component"));
        out
    }

    /// Components that contain at least one cycle.
    pub fn cyclic_sccs(&self) -> Vec<BTreeSet<TxnId>> {
        self.sccs()
            .into_iter()
            .filter(|c| {
                c.len() > 1 || {
                    let v = *c.iter().next().unwrap();
                    self.successors(v).any(|w| w == v)
                }
            })
            .collect()
    }

    pub fn is_acyclic(&self) -> bool {
        self.cyclic_sccs().is_empty()
    }

    /// All elementary cycles, each rotated to start at its smallest vertex.
    /// Fails once more than `cap` cycles have been found.
    pub fn elementary_cycles(&self, cap: usize) -> Result<Vec<Vec<TxnId>>, GraphError> {
        let mut cycles = Vec::new();
        let order: Vec<TxnId> = self.vertices().collect();
        for (k, &start) in order.iter().enumerate() {
            // Johnson: restrict to vertices >= start, then to start's component.
            let tail: BTreeSet<TxnId> = order[k..].iter().copied().collect();
            let sub = self.induced(&tail);
            let Some(comp) = sub.sccs().into_iter().find(|c| c.contains(&start)) else {
                continue;
            };
            let sub = sub.induced(&comp);
            if comp.len() == 1 && !sub.successors(start).any(|w| w == start) {
                continue;
            }
            let mut search = Johnson {
                graph: &sub,
                start,
                blocked: BTreeSet::new(),
                blocked_by: BTreeMap::new(),
                path: Vec::new(),
                out: &mut cycles,
                cap,
            };
            search.circuit(start)?;
        }
        Ok(cycles)
    }
}

struct Johnson<'a> {
    graph: &'a Digraph,
    start: TxnId,
    blocked: BTreeSet<TxnId>,
    blocked_by: BTreeMap<TxnId, BTreeSet<TxnId>>,
    path: Vec<TxnId>,
    out: &'a mut Vec<Vec<TxnId>>,
    cap: usize,
}

impl Johnson<'_> {
    fn circuit(&mut self, v: TxnId) -> Result<bool, GraphError> {
        let mut found = false;
        self.path.push(v);
        self.blocked.insert(v);
        let succ: Vec<TxnId> = self.graph.successors(v).collect();
        for &w in &succ {
            if w == self.start {
                if self.out.len() >= self.cap {
                    return Err(GraphError::CycleBudgetExceeded { cap: self.cap });
                }
                self.out.push(self.path.clone());
                found = true;
            } else if !self.blocked.contains(&w) && self.circuit(w)? {
                found = true;
            }
        }
        if found {
            self.unblock(v);
        } else {
            for &w in &succ {
                self.blocked_by.entry(w).or_default().insert(v);
            }
        }
        self.path.pop();
        Ok(found)
    }

    fn unblock(&mut self, v: TxnId) {
        let mut work = vec![v];
        while let Some(u) = work.pop() {
            if self.blocked.remove(&u) {
                if let Some(bs) = self.blocked_by.remove(&u) {
                    work.extend(bs);
                }
            }
        }
    }
}

/// Deterministic greedy feedback vertex set.
///
/// Repeatedly removes the vertex lying on the most remaining elementary cycles,
/// smallest id first on ties, until no cycle is left.
pub fn break_cycles(graph: &Digraph, cap: usize) -> Result<BTreeSet<TxnId>, GraphError> {
    let mut removed = BTreeSet::new();
    // Cycles never cross components, so each component is handled on its own.
    for comp in graph.cyclic_sccs() {
        let sub = graph.induced(&comp);
        let mut cycles = sub.elementary_cycles(cap)?;
        while !cycles.is_empty() {
            let mut count: BTreeMap<TxnId, usize> = BTreeMap::new();
            for c in &cycles {
                for v in c {
                    *count.entry(*v).or_default() += 1;
                }
            }
            // BTreeMap iterates in id order; `max_by_key` keeps the last maximum, so
            // walk in reverse to keep the smallest id among ties.
            let (&pick, _) = count
                .iter()
                .rev()
                .max_by_key(|(_, n)| **n)
                .expect("non-empty cycle list");
            removed.insert(pick);
            cycles.retain(|c| !c.contains(&pick));
        }
    }
    Ok(removed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: u64) -> TxnId {
        TxnId(v)
    }

    fn g(edges: &[(u64, u64)]) -> Digraph {
        Digraph::from_edges([], edges.iter().map(|(a, b)| (t(*a), t(*b))))
    }

    #[test]
    fn acyclic_has_no_cycles() {
        let d = g(&[(1, 2), (2, 3), (1, 3)]);
        assert!(d.elementary_cycles(10).unwrap().is_empty());
        assert!(break_cycles(&d, 10).unwrap().is_empty());
        assert!(d.is_acyclic());
    }

    #[test]
    fn two_cycle() {
        let d = g(&[(1, 2), (2, 1)]);
        assert_eq!(d.elementary_cycles(10).unwrap(), vec![vec![t(1), t(2)]]);
        assert_eq!(break_cycles(&d, 10).unwrap(), [t(1)].into());
    }

    #[test]
    fn complete_three() {
        let d = g(&[(1, 2), (2, 1), (1, 3), (3, 1), (2, 3), (3, 2)]);
        let cycles = d.elementary_cycles(100).unwrap();
        assert_eq!(cycles.len(), 5);
        assert_eq!(cycles.iter().filter(|c| c.len() == 2).count(), 3);
        assert_eq!(cycles.iter().filter(|c| c.len() == 3).count(), 2);
    }

    #[test]
    fn disjoint_two_cycles_one_each() {
        let d = g(&[(1, 2), (2, 1), (3, 4), (4, 3)]);
        assert_eq!(break_cycles(&d, 10).unwrap(), [t(1), t(3)].into());
    }

    #[test]
    fn cap_is_enforced() {
        let d = g(&[(1, 2), (2, 1), (1, 3), (3, 1), (2, 3), (3, 2)]);
        assert_eq!(
            d.elementary_cycles(4),
            Err(GraphError::CycleBudgetExceeded { cap: 4 })
        );
    }

    #[test]
    fn self_loop_counts_as_cycle() {
        let d = g(&[(1, 1)]);
        assert_eq!(d.elementary_cycles(10).unwrap(), vec![vec![t(1)]]);
        assert_eq!(break_cycles(&d, 10).unwrap(), [t(1)].into());
    }

    #[test]
    fn sccs_partition() {
        let d = g(&[(1, 2), (2, 1), (2, 3), (4, 4)]);
        let s = d.sccs();
        assert_eq!(s, vec![[t(1), t(2)].into(), [t(3)].into(), [t(4)].into()]);
        assert_eq!(d.cyclic_sccs(), vec![[t(1), t(2)].into(), [t(4)].into()]);
    }
}
