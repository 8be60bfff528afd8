//! Seeded discrete-event simulator.
//!
//! Events are processed in `(time, insertion sequence)` order from a single
//! queue; all randomness comes from one ChaCha stream seeded by the scenario, so
//! a scenario always produces the same trace.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::comm::{LeaderOracle, LeaderStrategy, MsgIds, Packet, Payload, Tom, TomOrdered, Urm};
use crate::graph::DEFAULT_CYCLE_CAP;
use crate::model::{ItemId, ReplicationMap, SiteId, TxnId};
use crate::replica::{Outbox, Outgoing, Replica, ReplicaConfig, Timer, TxnSpec};
use crate::trace::{LocalAbortReason, MsgClass, Trace, TraceEvent};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemPlacement {
    pub id: ItemId,
    pub replicas: BTreeSet<SiteId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrashSpec {
    pub site: SiteId,
    pub time: u64,
}

fn default_max_delay() -> u64 {
    1
}
fn default_cycle_cap() -> usize {
    DEFAULT_CYCLE_CAP
}
fn default_suspicion_delay() -> u64 {
    10
}
fn default_lock_timeout() -> u64 {
    40
}
fn default_step_cap() -> u64 {
    2_000_000
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    /// Network delays are drawn uniformly from `1..=max_delay`.
    #[serde(default = "default_max_delay")]
    pub max_delay: u64,
    #[serde(default)]
    pub leader_strategy: LeaderStrategy,
    #[serde(default)]
    pub colocate_leaders: bool,
    #[serde(default = "default_cycle_cap")]
    pub cycle_cap: usize,
    /// Time between a crash and every site suspecting it.
    #[serde(default = "default_suspicion_delay")]
    pub suspicion_delay: u64,
    #[serde(default = "default_lock_timeout")]
    pub lock_timeout: u64,
    #[serde(default = "default_step_cap")]
    pub step_cap: u64,
    pub sites: BTreeSet<SiteId>,
    pub items: Vec<ItemPlacement>,
    #[serde(default)]
    pub txns: Vec<TxnSpec>,
    #[serde(default)]
    pub crashes: Vec<CrashSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("step cap of {cap} exceeded at time {time} with {queued} events queued; undecided: {undecided:?}")]
    StepCapExceeded { cap: u64, time: u64, queued: usize, undecided: Vec<TxnId> },
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioParseError {
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Invalid(#[from] SimError),
}

impl Scenario {
    pub fn from_toml(s: &str) -> Result<Self, ScenarioParseError> {
        let sc: Scenario = toml::from_str(s)?;
        sc.replication_map()?;
        Ok(sc)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Validates the scenario and returns its replication map.
    pub fn replication_map(&self) -> Result<ReplicationMap, SimError> {
        let bad = |m: String| Err(SimError::InvalidScenario(m));
        if self.max_delay == 0 {
            return bad("max_delay must be at least 1".into());
        }
        let mut placement = BTreeMap::new();
        for it in &self.items {
            if placement.insert(it.id, it.replicas.clone()).is_some() {
                return bad(format!("item {} listed twice", it.id));
            }
        }
        let map = ReplicationMap::new(self.sites.clone(), placement)
            .map_err(|e| SimError::InvalidScenario(e.to_string()))?;
        let mut ids = BTreeSet::new();
        for t in &self.txns {
            if !ids.insert(t.id) {
                return bad(format!("transaction {} listed twice", t.id));
            }
            if !self.sites.contains(&t.origin) {
                return bad(format!("{} has unknown origin {}", t.id, t.origin));
            }
            if t.ops.is_empty() {
                return bad(format!("{} has no operations", t.id));
            }
            if let Some(op) = t.ops.iter().find(|o| !map.replicates(t.origin, o.item)) {
                return bad(format!("origin {} of {} does not replicate {}", t.origin, t.id, op.item));
            }
        }
        let crashed: BTreeSet<SiteId> = self.crashes.iter().map(|c| c.site).collect();
        if crashed.len() != self.crashes.len() {
            return bad("a site crashes at most once".into());
        }
        if let Some(c) = crashed.iter().find(|s| !self.sites.contains(s)) {
            return bad(format!("crash of unknown site {c}"));
        }
        for (x, reps) in map.placement() {
            if reps.is_subset(&crashed) {
                return bad(format!("every replica of {x} crashes"));
            }
        }
        Ok(map)
    }

    pub fn correct_sites(&self) -> BTreeSet<SiteId> {
        let crashed: BTreeSet<SiteId> = self.crashes.iter().map(|c| c.site).collect();
        self.sites.difference(&crashed).copied().collect()
    }
}

#[derive(Debug)]
enum Event {
    Begin(usize),
    Packet(Packet),
    Timer(SiteId, Timer),
    Crash(SiteId),
    Suspect(SiteId),
}

#[derive(Debug)]
struct Queued {
    time: u64,
    seq: u64,
    event: Event,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

pub struct Simulation {
    scenario: Scenario,
    map: Arc<ReplicationMap>,
    replicas: BTreeMap<SiteId, Replica>,
    crashed: BTreeSet<SiteId>,
    oracle: LeaderOracle,
    urm: Urm,
    tom: Tom,
    ids: MsgIds,
    rng: ChaCha8Rng,
    queue: BinaryHeap<Queued>,
    next_seq: u64,
    now: u64,
    steps: u64,
    trace: Trace,
}

/// Runs a scenario to quiescence and returns its trace.
pub fn run(scenario: &Scenario) -> Result<Trace, SimError> {
    let mut sim = Simulation::new(scenario.clone())?;
    sim.run()?;
    Ok(sim.into_trace())
}

impl Simulation {
    pub fn new(scenario: Scenario) -> Result<Self, SimError> {
        let map = Arc::new(scenario.replication_map()?);
        let config = ReplicaConfig {
            cycle_cap: scenario.cycle_cap,
            exec_step: 1,
            lock_timeout: scenario.lock_timeout,
        };
        let replicas =
            map.sites().iter().map(|s| (*s, Replica::new(*s, map.clone(), config))).collect();
        let mut sim = Self {
            oracle: LeaderOracle::new(scenario.leader_strategy),
            tom: Tom::new(map.placement(), scenario.colocate_leaders),
            urm: Urm::default(),
            ids: MsgIds::default(),
            rng: ChaCha8Rng::seed_from_u64(scenario.seed),
            queue: BinaryHeap::new(),
            next_seq: 0,
            now: 0,
            steps: 0,
            trace: Trace::default(),
            crashed: BTreeSet::new(),
            replicas,
            map,
            scenario,
        };
        let sc = &sim.scenario;
        sim.trace.push(
            0,
            TraceEvent::Scenario {
                sites: sc.sites.clone(),
                placement: sim.map.placement().clone(),
                crashes: sc.crashes.iter().map(|c| (c.site, c.time)).collect(),
                leader_strategy: sc.leader_strategy.name().to_string(),
                colocate_leaders: sc.colocate_leaders,
                max_delay: sc.max_delay,
                seed: sc.seed,
            },
        );
        let mut initial = Vec::new();
        for (i, t) in sim.scenario.txns.iter().enumerate() {
            initial.push((t.arrival, Event::Begin(i)));
        }
        for c in &sim.scenario.crashes {
            initial.push((c.time, Event::Crash(c.site)));
            initial.push((c.time + sim.scenario.suspicion_delay, Event::Suspect(c.site)));
        }
        for (time, ev) in initial {
            sim.schedule(time, ev);
        }
        Ok(sim)
    }

    pub fn replica(&self, site: SiteId) -> Option<&Replica> {
        self.replicas.get(&site)
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn into_trace(self) -> Trace {
        self.trace
    }

    /// Schedules a crash in addition to those listed in the scenario.
    pub fn inject_crash(&mut self, site: SiteId, time: u64) -> Result<(), SimError> {
        if !self.map.sites().contains(&site) {
            return Err(SimError::InvalidScenario(format!("crash of unknown site {site}")));
        }
        self.schedule(time.max(self.now), Event::Crash(site));
        self.schedule(time.max(self.now) + self.scenario.suspicion_delay, Event::Suspect(site));
        Ok(())
    }

    fn schedule(&mut self, time: u64, event: Event) {
        self.queue.push(Queued { time, seq: self.next_seq, event });
        self.next_seq += 1;
    }

    fn alive(&self, s: SiteId) -> bool {
        !self.crashed.contains(&s)
    }

    /// Processes events until quiescence.
    pub fn run(&mut self) -> Result<(), SimError> {
        loop {
            let Some(q) = self.queue.pop() else {
                let crashed = self.crashed.clone();
                let repairs = self.urm.repair(|s| !crashed.contains(&s));
                if repairs.is_empty() {
                    break;
                }
                for p in repairs {
                    self.send(p);
                }
                continue;
            };
            self.steps += 1;
            if self.steps > self.scenario.step_cap {
                return Err(SimError::StepCapExceeded {
                    cap: self.scenario.step_cap,
                    time: self.now,
                    queued: self.queue.len() + 1,
                    undecided: self.undecided(),
                });
            }
            self.now = q.time;
            self.handle(q.event);
        }
        for (site, r) in &self.replicas {
            if self.crashed.contains(site) {
                continue;
            }
            let leaders = self
                .map
                .items_at(*site)
                .into_iter()
                .map(|x| (x, self.oracle.leader(self.map.replicas(x), *site)))
                .collect();
            self.trace.push(
                self.now,
                TraceEvent::FinalState { site: *site, leaders, graph: r.graph().clone() },
            );
        }
        self.trace.push(self.now, TraceEvent::End { steps: self.steps });
        Ok(())
    }

    fn undecided(&self) -> Vec<TxnId> {
        let mut out = BTreeSet::new();
        for (s, r) in &self.replicas {
            if self.crashed.contains(s) {
                continue;
            }
            for t in r.graph().txn_ids() {
                if r.decision(t).is_none() {
                    out.insert(t);
                }
            }
        }
        out.into_iter().collect()
    }

    fn handle(&mut self, event: Event) {
        match event {
            Event::Begin(i) => {
                let spec = self.scenario.txns[i].clone();
                let site = spec.origin;
                if !self.alive(site) {
                    self.trace.push(
                        self.now,
                        TraceEvent::LocalAbort {
                            site,
                            txn: spec.id,
                            reason: LocalAbortReason::OriginCrashed,
                        },
                    );
                    return;
                }
                let mut out = Outbox::default();
                let r = self.replicas.get_mut(&site).expect("site");
                if let Err(e) = r.begin(spec, self.now, &mut out) {
                    out.trace.push(TraceEvent::ProtocolError { site, detail: e.to_string() });
                }
                self.apply(site, out);
            }
            Event::Timer(site, timer) => {
                if !self.alive(site) {
                    return;
                }
                let mut out = Outbox::default();
                let r = self.replicas.get_mut(&site).expect("site");
                match timer {
                    Timer::ExecStep { txn, .. } => r.exec_step(txn, self.now, &mut out),
                    Timer::LockTimeout { txn, epoch, .. } => r.lock_timeout(txn, epoch, &mut out),
                }
                self.apply(site, out);
            }
            Event::Crash(site) => {
                if !self.crashed.insert(site) {
                    return;
                }
                self.trace.push(self.now, TraceEvent::Crash { site });
                let lost = self.replicas.get_mut(&site).expect("site").crash();
                for txn in lost {
                    self.trace.push(
                        self.now,
                        TraceEvent::LocalAbort { site, txn, reason: LocalAbortReason::OriginCrashed },
                    );
                }
            }
            Event::Suspect(site) => {
                self.oracle.suspect(site);
                self.trace.push(self.now, TraceEvent::Suspect { site });
                let alive: Vec<SiteId> =
                    self.map.sites().iter().copied().filter(|s| self.alive(*s)).collect();
                for s in alive {
                    let mut out = Outbox::default();
                    let Self { replicas, oracle, map, .. } = self;
                    let leader = |x: ItemId| oracle.leader(map.replicas(x), s);
                    replicas.get_mut(&s).expect("site").leader_pump(&leader, &mut out);
                    self.apply(s, out);
                }
            }
            Event::Packet(p) => self.arrive(p),
        }
    }

    fn arrive(&mut self, p: Packet) {
        let at = p.to;
        // The sequencer stands for a replicated consensus service and keeps
        // ordering even if the site hosting it has crashed.
        if let Payload::TomPropose { tom } = p.payload {
            if let Some(ordered) = self.tom.on_propose(tom, at) {
                self.ordered(ordered);
            }
            return;
        }
        if !self.alive(at) {
            return;
        }
        match p.payload {
            Payload::UrmData { urm } => {
                let crashed = self.crashed.clone();
                for e in self.urm.on_data(urm, at, |s| !crashed.contains(&s)) {
                    self.send(e);
                }
            }
            Payload::UrmEcho { urm } => {
                // The relayed copy also counts as receiving the payload.
                let crashed = self.crashed.clone();
                for e in self.urm.on_data(urm, at, |s| !crashed.contains(&s)) {
                    self.send(e);
                }
                if let Some(txn) = self.urm.on_echo(urm, at) {
                    self.trace.push(self.now, TraceEvent::RDeliver { site: at, msg: urm, txn: txn.id });
                    let mut out = Outbox::default();
                    let Self { replicas, oracle, map, .. } = self;
                    let leader = |x: ItemId| oracle.leader(map.replicas(x), at);
                    replicas.get_mut(&at).expect("site").on_r_deliver(txn, &leader, &mut out);
                    self.apply(at, out);
                }
            }
            Payload::TomOrder { tom, item, seq } => {
                for d in self.tom.on_order(item, seq, tom, at) {
                    let r = self.replicas.get_mut(&at).expect("site");
                    let first = !r.has_delivered(d.op);
                    self.trace.push(
                        self.now,
                        TraceEvent::ToDeliver { site: at, msg: d.msg, op: d.op, item: d.item, seq: d.seq, first },
                    );
                    let mut out = Outbox::default();
                    r.on_to_deliver(d.txn, d.op, &mut out);
                    self.apply(at, out);
                }
            }
            Payload::Graph { graph, .. } => {
                let mut out = Outbox::default();
                let r = self.replicas.get_mut(&at).expect("site");
                let merged = match r.on_receive_graph(&graph, &mut out) {
                    Ok(m) => m,
                    Err(e) => {
                        out.trace.push(TraceEvent::ProtocolError {
                            site: at,
                            detail: format!("rejected graph from {}: {e}", p.from),
                        });
                        false
                    }
                };
                self.trace.push(self.now, TraceEvent::GraphRecv { site: at, from: p.from, msg: p.msg, merged });
                self.apply(at, out);
            }
            Payload::TomPropose { .. } => unreachable!("handled above"),
        }
    }

    fn ordered(&mut self, o: TomOrdered) {
        self.trace.push(self.now, TraceEvent::ToOrder { msg: o.msg, item: o.item, seq: o.seq, op: o.op });
        for p in o.packets {
            self.send(p);
        }
    }

    fn delay(&mut self, from: SiteId, to: SiteId) -> u64 {
        if from == to {
            0
        } else {
            self.rng.gen_range(1..=self.scenario.max_delay)
        }
    }

    fn send(&mut self, p: Packet) {
        self.trace.push(
            self.now,
            TraceEvent::Send {
                site: p.from,
                to: p.to,
                msg: p.msg,
                class: p.class,
                txn: p.txn,
                op: p.op,
                failover: p.failover,
            },
        );
        let mut d = self.delay(p.from, p.to);
        if p.extra_hop {
            d += self.rng.gen_range(1..=self.scenario.max_delay);
        }
        self.schedule(self.now + d, Event::Packet(p));
    }

    /// Turns a handler's effects into trace records, messages and timers.
    fn apply(&mut self, site: SiteId, out: Outbox) {
        for ev in out.trace {
            self.trace.push(self.now, ev);
        }
        for s in out.sends {
            match s {
                Outgoing::RMcast { txn, members } => {
                    let (msg, packets) = self.urm.multicast(&mut self.ids, site, &members, txn.clone());
                    self.trace.push(
                        self.now,
                        TraceEvent::RMcast { site, msg, members, txn: (*txn).clone() },
                    );
                    for p in packets {
                        self.send(p);
                    }
                }
                Outgoing::ToMcast { op, item, txn } => {
                    // A site other than the group's first member only leads after a suspicion.
                    let failover = self.oracle.strategy == LeaderStrategy::MinAlive
                        && self.map.replicas(item).iter().next() != Some(&site);
                    let (msg, packets, ordered) =
                        self.tom.multicast(&mut self.ids, site, op, item, txn, failover);
                    self.trace.push(self.now, TraceEvent::ToMcast { site, msg, op, item, failover });
                    for p in packets {
                        self.send(p);
                    }
                    if let Some(o) = ordered {
                        self.ordered(o);
                    }
                }
                Outgoing::Graph { to, subject, graph, relay } => {
                    let msg = self.ids.next();
                    let class = if relay { MsgClass::GraphRelay } else { MsgClass::Graph };
                    self.send(Packet {
                        from: site,
                        to,
                        msg,
                        class,
                        txn: subject,
                        op: None,
                        failover: false,
                        extra_hop: false,
                        payload: Payload::Graph { subject, graph, relay },
                    });
                }
            }
        }
        for t in out.timers {
            let after = match t {
                Timer::ExecStep { after, .. } | Timer::LockTimeout { after, .. } => after,
            };
            self.schedule(self.now + after, Event::Timer(site, t));
        }
    }
}
