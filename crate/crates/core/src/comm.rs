//! Simulated group communication: uniform reliable multicast, per-item uniform
//! total order multicast and the eventual weak leader oracle.
//!
//! These components only decide *what* is sent and delivered. The simulator owns
//! time, delays and crashes and feeds arrivals back in.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::graph::PrecedenceGraph;
use crate::model::{ItemId, OpId, SiteId, Transaction, TxnId};
use crate::trace::{MsgClass, MsgId};

#[derive(Debug, Clone)]
pub enum Payload {
    UrmData { urm: MsgId },
    UrmEcho { urm: MsgId },
    TomPropose { tom: MsgId },
    TomOrder { tom: MsgId, item: ItemId, seq: u64 },
    Graph { subject: TxnId, graph: Arc<PrecedenceGraph>, relay: bool },
}

/// A point-to-point message in flight.
#[derive(Debug, Clone)]
pub struct Packet {
    pub from: SiteId,
    pub to: SiteId,
    pub msg: MsgId,
    pub class: MsgClass,
    pub txn: TxnId,
    pub op: Option<OpId>,
    pub failover: bool,
    /// Total-order notices take one more hop (the learn phase) in groups of two or more.
    pub extra_hop: bool,
    pub payload: Payload,
}

/// Allocates message identifiers shared by all primitives of one run.
#[derive(Debug, Default)]
pub struct MsgIds(MsgId);

impl MsgIds {
    pub fn next(&mut self) -> MsgId {
        let id = self.0;
        self.0 += 1;
        id
    }
}

// --------------------------------------------------------------------------
// Uniform reliable multicast

#[derive(Debug)]
struct UrmState {
    sender: SiteId,
    txn: Arc<Transaction>,
    members: Vec<SiteId>,
    received: BTreeSet<SiteId>,
    delivered: BTreeSet<SiteId>,
    echo_in_flight: BTreeSet<SiteId>,
}

/// Sender sends the payload to every member; each member relays it once to its
/// ring successor, and a member delivers on the first relayed copy it gets.
#[derive(Debug, Default)]
pub struct Urm {
    msgs: BTreeMap<MsgId, UrmState>,
}

impl Urm {
    pub fn multicast(
        &mut self,
        ids: &mut MsgIds,
        sender: SiteId,
        members: &BTreeSet<SiteId>,
        txn: Arc<Transaction>,
    ) -> (MsgId, Vec<Packet>) {
        let urm = ids.next();
        let packets = members
            .iter()
            .map(|m| Packet {
                from: sender,
                to: *m,
                msg: urm,
                class: MsgClass::UrmData,
                txn: txn.id,
                op: None,
                failover: false,
                extra_hop: false,
                payload: Payload::UrmData { urm },
            })
            .collect();
        self.msgs.insert(
            urm,
            UrmState {
                sender,
                txn,
                members: members.iter().copied().collect(),
                received: BTreeSet::new(),
                delivered: BTreeSet::new(),
                echo_in_flight: BTreeSet::new(),
            },
        );
        (urm, packets)
    }

    pub fn sender(&self, urm: MsgId) -> Option<SiteId> {
        self.msgs.get(&urm).map(|s| s.sender)
    }

    /// Payload arrival at a correct member: relay it to the next correct member.
    pub fn on_data(&mut self, urm: MsgId, at: SiteId, alive: impl Fn(SiteId) -> bool) -> Vec<Packet> {
        let Some(st) = self.msgs.get_mut(&urm) else { return Vec::new() };
        if !st.received.insert(at) {
            return Vec::new();
        }
        let n = st.members.len();
        let pos = st.members.iter().position(|m| *m == at).expect("member");
        let next = (1..=n).map(|k| st.members[(pos + k) % n]).find(|m| alive(*m));
        let Some(to) = next else { return Vec::new() };
        st.echo_in_flight.insert(to);
        vec![echo(urm, at, to, st.txn.id, false)]
    }

    /// Relayed copy arrives: delivers the transaction unless already delivered.
    pub fn on_echo(&mut self, urm: MsgId, at: SiteId) -> Option<Arc<Transaction>> {
        let st = self.msgs.get_mut(&urm)?;
        st.echo_in_flight.remove(&at);
        st.received.insert(at);
        st.delivered.insert(at).then(|| st.txn.clone())
    }

    /// Completes multicasts whose relay chain was cut by a crash: once any member
    /// got the payload, every correct member that has neither delivered nor a
    /// copy in flight gets one.
    pub fn repair(&mut self, alive: impl Fn(SiteId) -> bool) -> Vec<Packet> {
        let mut out = Vec::new();
        for (urm, st) in &mut self.msgs {
            let holder = st
                .received
                .iter()
                .copied()
                .find(|s| alive(*s))
                .or_else(|| st.received.iter().next().copied());
            let Some(holder) = holder else { continue };
            for m in st.members.iter().copied() {
                if alive(m) && !st.delivered.contains(&m) && !st.echo_in_flight.contains(&m) {
                    st.echo_in_flight.insert(m);
                    out.push(echo(*urm, holder, m, st.txn.id, true));
                }
            }
        }
        out
    }

    pub fn delivered(&self, urm: MsgId) -> BTreeSet<SiteId> {
        self.msgs.get(&urm).map(|s| s.delivered.clone()).unwrap_or_default()
    }
}

fn echo(urm: MsgId, from: SiteId, to: SiteId, txn: TxnId, failover: bool) -> Packet {
    Packet {
        from,
        to,
        msg: urm,
        class: MsgClass::UrmEcho,
        txn,
        op: None,
        failover,
        extra_hop: false,
        payload: Payload::UrmEcho { urm },
    }
}

// --------------------------------------------------------------------------
// Uniform total order multicast

#[derive(Debug)]
struct TomEntry {
    op: OpId,
    item: ItemId,
    txn: Arc<Transaction>,
    sequencer: SiteId,
    failover: bool,
    seq: Option<u64>,
}

#[derive(Debug, Default)]
struct TomGroup {
    members: BTreeSet<SiteId>,
    next_seq: u64,
    next_delivery: BTreeMap<SiteId, u64>,
    buffered: BTreeMap<SiteId, BTreeMap<u64, MsgId>>,
}

/// One total-order group per item. Proposals go to the group's sequencer, which
/// numbers them and sends ordered notices to every member; members deliver in
/// sequence-number order.
#[derive(Debug)]
pub struct Tom {
    colocated: bool,
    groups: BTreeMap<ItemId, TomGroup>,
    entries: BTreeMap<MsgId, TomEntry>,
}

/// A TO-delivery handed to a member.
#[derive(Debug, Clone)]
pub struct TomDelivery {
    pub msg: MsgId,
    pub op: OpId,
    pub item: ItemId,
    pub seq: u64,
    pub txn: Arc<Transaction>,
}

/// A proposal that received its sequence number.
#[derive(Debug, Clone)]
pub struct TomOrdered {
    pub msg: MsgId,
    pub item: ItemId,
    pub seq: u64,
    pub op: OpId,
    pub packets: Vec<Packet>,
}

impl Tom {
    pub fn new(placement: &BTreeMap<ItemId, BTreeSet<SiteId>>, colocated: bool) -> Self {
        let groups = placement
            .iter()
            .map(|(x, members)| (*x, TomGroup { members: members.clone(), ..TomGroup::default() }))
            .collect();
        Self { colocated, groups, entries: BTreeMap::new() }
    }

    pub fn members(&self, item: ItemId) -> Option<&BTreeSet<SiteId>> {
        self.groups.get(&item).map(|g| &g.members)
    }

    /// Submits `op` to the group of `item`. With colocated leaders the sender is
    /// the sequencer and orders at once; otherwise it proposes to every member and
    /// the highest-id member sequences.
    pub fn multicast(
        &mut self,
        ids: &mut MsgIds,
        sender: SiteId,
        op: OpId,
        item: ItemId,
        txn: Arc<Transaction>,
        failover: bool,
    ) -> (MsgId, Vec<Packet>, Option<TomOrdered>) {
        let msg = ids.next();
        let group = self.groups.get(&item).expect("registered group");
        let sequencer = if self.colocated {
            sender
        } else {
            *group.members.iter().next_back().expect("non-empty group")
        };
        let packets: Vec<Packet> = if self.colocated {
            Vec::new()
        } else {
            group
                .members
                .iter()
                .map(|m| Packet {
                    from: sender,
                    to: *m,
                    msg,
                    class: MsgClass::TomPropose,
                    txn: txn.id,
                    op: Some(op),
                    failover,
                    extra_hop: false,
                    payload: Payload::TomPropose { tom: msg },
                })
                .collect()
        };
        self.entries.insert(msg, TomEntry { op, item, txn, sequencer, failover, seq: None });
        let ordered = self.colocated.then(|| self.order(msg));
        (msg, packets, ordered)
    }

    /// A proposal reaches a member; only the sequencer acts on it.
    pub fn on_propose(&mut self, msg: MsgId, at: SiteId) -> Option<TomOrdered> {
        let e = self.entries.get(&msg)?;
        (e.sequencer == at && e.seq.is_none()).then(|| self.order(msg))
    }

    fn order(&mut self, msg: MsgId) -> TomOrdered {
        let e = self.entries.get_mut(&msg).expect("entry");
        let group = self.groups.get_mut(&e.item).expect("registered group");
        let seq = group.next_seq;
        group.next_seq += 1;
        e.seq = Some(seq);
        let extra_hop = group.members.len() > 1;
        let packets = group
            .members
            .iter()
            .map(|m| Packet {
                from: e.sequencer,
                to: *m,
                msg,
                class: MsgClass::TomOrder,
                txn: e.txn.id,
                op: Some(e.op),
                failover: e.failover,
                extra_hop,
                payload: Payload::TomOrder { tom: msg, item: e.item, seq },
            })
            .collect();
        TomOrdered { msg, item: e.item, seq, op: e.op, packets }
    }

    /// An ordered notice arrives at a member: returns every delivery it unblocks.
    pub fn on_order(&mut self, item: ItemId, seq: u64, msg: MsgId, at: SiteId) -> Vec<TomDelivery> {
        let group = self.groups.get_mut(&item).expect("registered group");
        group.buffered.entry(at).or_default().insert(seq, msg);
        let next = group.next_delivery.entry(at).or_insert(0);
        let buf = group.buffered.get_mut(&at).expect("just inserted");
        let mut out = Vec::new();
        while let Some(m) = buf.remove(next) {
            let e = &self.entries[&m];
            out.push(TomDelivery { msg: m, op: e.op, item, seq: *next, txn: e.txn.clone() });
            *next += 1;
        }
        out
    }
}

// --------------------------------------------------------------------------
// Weak leader

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LeaderStrategy {
    /// Smallest group member not yet suspected of having crashed.
    #[default]
    #[serde(rename = "min-alive")]
    MinAlive,
    /// Every site considers itself the leader.
    #[serde(rename = "self")]
    SelfLeader,
}

impl LeaderStrategy {
    pub fn name(self) -> &'static str {
        match self {
            LeaderStrategy::MinAlive => "min-alive",
            LeaderStrategy::SelfLeader => "self",
        }
    }
}

impl std::str::FromStr for LeaderStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "min-alive" => Ok(LeaderStrategy::MinAlive),
            "self" => Ok(LeaderStrategy::SelfLeader),
            other => Err(format!("unknown leader strategy '{other}' (expected self or min-alive)")),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LeaderOracle {
    pub strategy: LeaderStrategy,
    suspected: BTreeSet<SiteId>,
}

impl LeaderOracle {
    pub fn new(strategy: LeaderStrategy) -> Self {
        Self { strategy, suspected: BTreeSet::new() }
    }

    pub fn suspect(&mut self, site: SiteId) {
        self.suspected.insert(site);
    }

    /// `wleader(group)` as queried at site `at`.
    pub fn leader(&self, group: &BTreeSet<SiteId>, at: SiteId) -> SiteId {
        match self.strategy {
            LeaderStrategy::SelfLeader => at,
            LeaderStrategy::MinAlive => group
                .iter()
                .copied()
                .find(|s| !self.suspected.contains(s))
                .unwrap_or(at),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Operation, Value};

    fn txn() -> Arc<Transaction> {
        let op = Operation::write(OpId::new(TxnId(1), 0), ItemId(0), Value::from_str_bytes("v"));
        Arc::new(Transaction::new(TxnId(1), SiteId(0), 0, 1, vec![op], BTreeSet::new()).unwrap())
    }

    fn sites(v: &[u32]) -> BTreeSet<SiteId> {
        v.iter().map(|s| SiteId(*s)).collect()
    }

    #[test]
    fn urm_ring_delivers_everywhere_once() {
        let mut ids = MsgIds::default();
        let mut urm = Urm::default();
        let (m, data) = urm.multicast(&mut ids, SiteId(0), &sites(&[0, 1, 2]), txn());
        assert_eq!(data.len(), 3);
        let mut echoes = Vec::new();
        for p in &data {
            echoes.extend(urm.on_data(m, p.to, |_| true));
        }
        assert_eq!(echoes.len(), 3);
        let delivered: Vec<_> = echoes.iter().filter_map(|e| urm.on_echo(m, e.to)).collect();
        assert_eq!(delivered.len(), 3);
        assert!(urm.on_echo(m, SiteId(1)).is_none());
        assert!(urm.repair(|_| true).is_empty());
    }

    #[test]
    fn urm_repair_after_relay_crash() {
        let mut ids = MsgIds::default();
        let mut urm = Urm::default();
        let (m, _) = urm.multicast(&mut ids, SiteId(9), &sites(&[0, 1, 2]), txn());
        // Site 0 gets the payload, relays to 1; site 1 and 2 never get the data.
        let e = urm.on_data(m, SiteId(0), |_| true);
        assert_eq!(e[0].to, SiteId(1));
        urm.on_echo(m, SiteId(1));
        let fix = urm.repair(|s| s != SiteId(1));
        let targets: Vec<_> = fix.iter().map(|p| p.to).collect();
        assert_eq!(targets, vec![SiteId(0), SiteId(2)]);
        assert!(fix.iter().all(|p| p.failover));
    }

    #[test]
    fn tom_delivers_in_sequence_order() {
        let placement = BTreeMap::from([(ItemId(0), sites(&[0, 1]))]);
        let mut tom = Tom::new(&placement, false);
        let mut ids = MsgIds::default();
        let t = txn();
        let (a, pa, _) = tom.multicast(&mut ids, SiteId(0), OpId::new(TxnId(1), 0), ItemId(0), t.clone(), false);
        let (b, _, _) = tom.multicast(&mut ids, SiteId(1), OpId::new(TxnId(1), 0), ItemId(0), t, true);
        assert_eq!(pa.len(), 2);
        assert!(tom.on_propose(b, SiteId(0)).is_none());
        let ob = tom.on_propose(b, SiteId(1)).unwrap();
        let oa = tom.on_propose(a, SiteId(1)).unwrap();
        assert_eq!((ob.seq, oa.seq), (0, 1));
        assert!(tom.on_order(ItemId(0), 1, a, SiteId(0)).is_empty());
        let d = tom.on_order(ItemId(0), 0, b, SiteId(0));
        assert_eq!(d.iter().map(|d| d.msg).collect::<Vec<_>>(), vec![b, a]);
    }

    #[test]
    fn leaders() {
        let g = sites(&[1, 2, 3]);
        let mut o = LeaderOracle::new(LeaderStrategy::MinAlive);
        assert_eq!(o.leader(&g, SiteId(3)), SiteId(1));
        o.suspect(SiteId(1));
        assert_eq!(o.leader(&g, SiteId(3)), SiteId(2));
        let s = LeaderOracle::new(LeaderStrategy::SelfLeader);
        assert_eq!(s.leader(&g, SiteId(3)), SiteId(3));
    }
}
