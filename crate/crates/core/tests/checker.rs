mod common;

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use common::History;
use pregraph::checker::{
    assert_liveness_and_agreement, assert_serializable, build_mvsg, build_version_order, check, EdgeKind,
    TraceFacts, ViolationClass,
};
use pregraph::model::{OpId, TxnId};
use pregraph::trace::Trace;

fn t(v: u64) -> TxnId {
    TxnId(v)
}

fn mvsg_edges(trace: &Trace) -> BTreeMap<(TxnId, TxnId), BTreeSet<EdgeKind>> {
    let facts = TraceFacts::from_trace(trace);
    let vo = build_version_order(&facts).unwrap();
    build_mvsg(&facts, &vo).unwrap().edges
}

#[test]
fn single_write_gives_singleton_order() {
    let mut h = History::new(&[0], &[(0, &[0])]);
    h.submit(1, &[(0, true)]);
    h.deliver(0, 1, 0);
    h.commit(0, 1);
    let facts = TraceFacts::from_trace(&h.finish());
    assert_eq!(build_version_order(&facts).unwrap()[&pregraph::model::ItemId(0)], vec![OpId::new(t(1), 0)]);
}

#[test]
fn delivery_order_is_version_order() {
    let mut h = History::new(&[0, 1], &[(0, &[0, 1])]);
    h.submit(1, &[(0, true)]);
    h.submit(2, &[(0, true)]);
    for s in [0, 1] {
        h.deliver(s, 1, 0);
        h.deliver(s, 2, 0);
        h.commit(s, 1);
        h.commit(s, 2);
    }
    let trace = h.finish();
    let facts = TraceFacts::from_trace(&trace);
    let vo = build_version_order(&facts).unwrap();
    assert_eq!(vo[&pregraph::model::ItemId(0)], vec![OpId::new(t(1), 0), OpId::new(t(2), 0)]);
    assert_eq!(mvsg_edges(&trace).into_keys().collect::<Vec<_>>(), vec![(t(1), t(2))]);
}

#[test]
fn replicas_disagreeing_on_order_is_reported() {
    let mut h = History::new(&[0, 1], &[(0, &[0, 1])]);
    h.submit(1, &[(0, true)]);
    h.submit(2, &[(0, true)]);
    h.deliver(0, 1, 0);
    h.deliver(0, 2, 0);
    h.deliver(1, 2, 0);
    h.deliver(1, 1, 0);
    for s in [0, 1] {
        h.commit(s, 1);
        h.commit(s, 2);
    }
    let facts = TraceFacts::from_trace(&h.finish());
    let errs = build_version_order(&facts).unwrap_err();
    assert!(errs.iter().all(|v| v.class == ViolationClass::OrderDisagreement));
}

#[test]
fn read_between_versions_gets_both_edges() {
    // T3 reads T1's version of x; T2 writes the next version.
    let mut h = History::new(&[0], &[(0, &[0])]);
    h.submit(1, &[(0, true)]);
    h.submit(2, &[(0, true)]);
    h.submit(3, &[(0, false)]);
    h.deliver(0, 1, 0);
    h.deliver(0, 2, 0);
    h.read(3, 0, Some(1));
    for x in [1, 2, 3] {
        h.commit(0, x);
    }
    let edges = mvsg_edges(&h.finish());
    assert_eq!(edges[&(t(1), t(3))], [EdgeKind::ReadFrom].into());
    assert_eq!(edges[&(t(3), t(2))], [EdgeKind::VersionOrder].into());
    assert_eq!(edges[&(t(1), t(2))], [EdgeKind::VersionOrder].into());
    assert_eq!(edges.len(), 3);
}

#[test]
fn empty_history_has_empty_graph() {
    let trace = History::new(&[0], &[(0, &[0])]).finish();
    let facts = TraceFacts::from_trace(&trace);
    let g = build_mvsg(&facts, &build_version_order(&facts).unwrap()).unwrap();
    assert!(g.vertices.is_empty() && g.edges.is_empty());
    assert!(assert_serializable(&g).is_ok());
}

#[test]
fn write_skew_is_a_two_cycle() {
    // Both read the initial x and y; T1 writes x, T2 writes y.
    let mut h = History::new(&[0], &[(0, &[0]), (1, &[0])]);
    h.submit(1, &[(0, false), (1, false), (0, true)]);
    h.submit(2, &[(0, false), (1, false), (1, true)]);
    h.read(1, 0, None);
    h.read(1, 1, None);
    h.read(2, 0, None);
    h.read(2, 1, None);
    h.deliver(0, 1, 2);
    h.deliver(0, 2, 2);
    h.commit(0, 1);
    h.commit(0, 2);
    let report = check(&h.finish());
    let v = report.violations.iter().find(|v| v.class == ViolationClass::NotSerializable).unwrap();
    assert!(
        v.detail == "cycle T1 -> T2" || v.detail == "cycle T2 -> T1",
        "{}",
        v.detail
    );
}

#[test]
fn read_of_unwritten_version_is_dangling() {
    let mut h = History::new(&[0], &[(0, &[0])]);
    h.submit(1, &[(0, false)]);
    h.read(1, 0, Some(9));
    h.commit(0, 1);
    let report = check(&h.finish());
    assert!(report.has(ViolationClass::DanglingRead));
}

#[test]
fn flipped_decision_breaks_agreement() {
    let mut h = History::new(&[0, 1], &[(0, &[0, 1])]);
    h.submit(1, &[(0, true)]);
    h.deliver(0, 1, 0);
    h.deliver(1, 1, 0);
    h.commit(0, 1);
    h.abort(1, 1);
    let v = assert_liveness_and_agreement(&TraceFacts::from_trace(&h.finish()));
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].class, ViolationClass::DecisionDisagreement);
}

#[test]
fn missing_decision_and_delivery_are_reported() {
    let mut h = History::new(&[0, 1], &[(0, &[0, 1])]);
    h.submit(1, &[(0, true)]);
    h.deliver(0, 1, 0);
    h.commit(0, 1);
    let v = assert_liveness_and_agreement(&TraceFacts::from_trace(&h.finish()));
    let classes: BTreeSet<_> = v.iter().map(|v| v.class).collect();
    assert_eq!(classes, [ViolationClass::Undecided, ViolationClass::MissingDelivery].into());
}

// ---- brute-force serial-order oracle ---------------------------------------

#[derive(Debug, Clone)]
struct Hist {
    /// Per transaction: items read, items written, committed.
    txns: Vec<(Vec<u32>, BTreeSet<u32>, bool)>,
    /// Per read (txn index, read index): choice among the item's committed writers.
    read_choice: Vec<usize>,
    /// Per item: permutation key for the version order.
    vo_keys: Vec<Vec<u32>>,
}

fn hist() -> impl Strategy<Value = Hist> {
    let txn = (
        prop::collection::vec(0u32..2, 0..3),
        prop::collection::btree_set(0u32..2, 0..3),
        prop::bool::weighted(0.85),
    );
    (
        prop::collection::vec(txn, 1..=4),
        prop::collection::vec(any::<usize>(), 12),
        prop::collection::vec(prop::collection::vec(any::<u32>(), 4), 2),
    )
        .prop_map(|(txns, read_choice, vo_keys)| Hist { txns, read_choice, vo_keys })
}

type Reads = Vec<(u64, u32, Option<u64>)>;

/// Turns the random description into concrete reads and version orders over
/// committed transactions (ids are 1-based), skipping empty transactions.
fn concretize(h: &Hist) -> (BTreeSet<u64>, BTreeMap<u32, Vec<u64>>, Reads) {
    let live = |i: usize| !h.txns[i].0.is_empty() || !h.txns[i].1.is_empty();
    let committed: BTreeSet<u64> =
        (0..h.txns.len()).filter(|i| live(*i) && h.txns[*i].2).map(|i| i as u64 + 1).collect();
    let mut vo = BTreeMap::new();
    for x in 0..2u32 {
        let mut ws: Vec<u64> = committed.iter().copied().filter(|t| h.txns[*t as usize - 1].1.contains(&x)).collect();
        ws.sort_by_key(|t| (h.vo_keys[x as usize][*t as usize - 1], *t));
        vo.insert(x, ws);
    }
    let mut reads = Vec::new();
    let mut k = 0;
    for (i, (rs, _, _)) in h.txns.iter().enumerate() {
        let me = i as u64 + 1;
        for x in rs {
            let options: Vec<Option<u64>> =
                std::iter::once(None).chain(vo[x].iter().filter(|w| **w != me).map(|w| Some(*w))).collect();
            reads.push((me, *x, options[h.read_choice[k % 12] % options.len()]));
            k += 1;
        }
    }
    (committed, vo, reads)
}

fn build_trace(h: &Hist, vo: &BTreeMap<u32, Vec<u64>>, reads: &Reads) -> Trace {
    let mut hs = History::new(&[0], &[(0, &[0]), (1, &[0])]);
    for (i, (rs, ws, _)) in h.txns.iter().enumerate() {
        let ops: Vec<(u32, bool)> = rs.iter().map(|x| (*x, false)).chain(ws.iter().map(|x| (*x, true))).collect();
        if !ops.is_empty() {
            hs.submit(i as u64 + 1, &ops);
        }
    }
    let write_idx = |t: u64, x: u32| {
        let (rs, ws, _) = &h.txns[t as usize - 1];
        (rs.len() + ws.iter().position(|y| *y == x).unwrap()) as u32
    };
    // Aborted writers are delivered first; they must not show up in the order.
    for (i, (_, ws, c)) in h.txns.iter().enumerate() {
        if !c {
            for x in ws {
                hs.deliver(0, i as u64 + 1, write_idx(i as u64 + 1, *x));
            }
        }
    }
    for (x, ws) in vo {
        for t in ws {
            hs.deliver(0, *t, write_idx(*t, *x));
        }
    }
    let mut read_idx: BTreeMap<u64, u32> = BTreeMap::new();
    for (me, _, writer) in reads {
        let i = read_idx.entry(*me).or_default();
        hs.read(*me, *i, *writer);
        *i += 1;
    }
    for (i, (rs, ws, c)) in h.txns.iter().enumerate() {
        if rs.is_empty() && ws.is_empty() {
            continue;
        }
        if *c {
            hs.commit(0, i as u64 + 1);
        } else {
            hs.abort(0, i as u64 + 1);
        }
    }
    hs.finish()
}

fn permutations(v: &[u64]) -> Vec<Vec<u64>> {
    if v.is_empty() {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for i in 0..v.len() {
        let mut rest = v.to_vec();
        let head = rest.remove(i);
        for mut p in permutations(&rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

/// Whether some serial order of the committed transactions reproduces every
/// committed read. With `keep_versions` the writers of each item must also appear
/// in the given version order; otherwise only the final writer must match.
fn serial_oracle(
    h: &Hist,
    committed: &BTreeSet<u64>,
    vo: &BTreeMap<u32, Vec<u64>>,
    reads: &Reads,
    keep_versions: bool,
) -> bool {
    let writes = |t: u64, x: u32| h.txns[t as usize - 1].1.contains(&x);
    permutations(&committed.iter().copied().collect::<Vec<_>>()).into_iter().any(|order| {
        let pos: BTreeMap<u64, usize> = order.iter().enumerate().map(|(i, t)| (*t, i)).collect();
        let versions_ok = vo.iter().all(|(x, ws)| {
            let serial: Vec<u64> = order.iter().copied().filter(|t| writes(*t, *x)).collect();
            if keep_versions {
                serial == *ws
            } else {
                serial.last() == ws.last()
            }
        });
        let reads_ok = reads.iter().filter(|(me, _, _)| committed.contains(me)).all(|(me, x, writer)| {
            let last = order[..pos[me]].iter().rev().find(|t| writes(**t, *x)).copied();
            last == *writer
        });
        versions_ok && reads_ok
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 2000, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn mvsg_acyclicity_matches_serial_order_oracle(h in hist()) {
        let (committed, vo, reads) = concretize(&h);
        let trace = build_trace(&h, &vo, &reads);
        let facts = TraceFacts::from_trace(&trace);
        let order = build_version_order(&facts).unwrap();
        let g = build_mvsg(&facts, &order).unwrap();
        prop_assert_eq!(g.vertices.iter().map(|t| t.0).collect::<BTreeSet<_>>(), committed.clone());
        let acyclic = assert_serializable(&g).is_ok();
        prop_assert_eq!(acyclic, serial_oracle(&h, &committed, &vo, &reads, true));
        if acyclic {
            prop_assert!(serial_oracle(&h, &committed, &vo, &reads, false));
        }
    }
}
