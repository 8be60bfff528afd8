//! Random scenario generation for campaigns.

use std::collections::BTreeSet;

use rand::seq::{IteratorRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checker::{check, TraceFacts, Violation};
use crate::comm::LeaderStrategy;
use crate::model::{ItemId, SiteId, TxnId, Value};
use crate::replica::{OpSpec, TxnSpec};
use crate::sim::{run, CrashSpec, ItemPlacement, Scenario};

/// Bounds for generated scenarios. Ranges are inclusive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub sites: (u32, u32),
    pub items: (u32, u32),
    pub degree: (usize, usize),
    pub txns: (u64, u64),
    pub ops: (usize, usize),
    pub crashes: (usize, usize),
    pub max_delay: (u64, u64),
    /// Probability that an operation is a write.
    pub write_ratio: f64,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            sites: (3, 9),
            items: (2, 6),
            degree: (1, 3),
            txns: (5, 40),
            ops: (1, 4),
            crashes: (0, 2),
            max_delay: (1, 5),
            write_ratio: 0.5,
        }
    }
}

/// Seed of the `i`-th scenario of a campaign.
pub fn scenario_seed(campaign_seed: u64, i: u64) -> u64 {
    campaign_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i)
}

pub fn random_scenario(seed: u64, cfg: &CampaignConfig) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_sites = rng.gen_range(cfg.sites.0..=cfg.sites.1);
    let n_items = rng.gen_range(cfg.items.0..=cfg.items.1);
    let sites: Vec<SiteId> = (0..n_sites).map(SiteId).collect();
    let items: Vec<ItemPlacement> = (0..n_items)
        .map(|x| {
            let d = rng.gen_range(cfg.degree.0..=cfg.degree.1).min(sites.len());
            let replicas = sites.choose_multiple(&mut rng, d).copied().collect();
            ItemPlacement { id: ItemId(x), replicas }
        })
        .collect();
    let holders: Vec<SiteId> = sites
        .iter()
        .copied()
        .filter(|s| items.iter().any(|i| i.replicas.contains(s)))
        .collect();

    let n_txns = rng.gen_range(cfg.txns.0..=cfg.txns.1);
    let horizon = n_txns * 3;
    let mut txns = Vec::new();
    for id in 1..=n_txns {
        let origin = *holders.choose(&mut rng).expect("some site holds an item");
        let local: Vec<ItemId> =
            items.iter().filter(|i| i.replicas.contains(&origin)).map(|i| i.id).collect();
        let n_ops = rng.gen_range(cfg.ops.0..=cfg.ops.1);
        let ops = (0..n_ops)
            .map(|k| {
                let item = *local.choose(&mut rng).expect("origin holds an item");
                if rng.gen_bool(cfg.write_ratio) {
                    OpSpec::write(item, Value(format!("{id}.{k}").into_bytes()))
                } else {
                    OpSpec::read(item)
                }
            })
            .collect();
        txns.push(TxnSpec { id: TxnId(id), origin, arrival: rng.gen_range(0..=horizon), ops });
    }
    txns.sort_by_key(|t| (t.arrival, t.id));

    let n_crashes = rng.gen_range(cfg.crashes.0..=cfg.crashes.1);
    let mut crashed: BTreeSet<SiteId> = BTreeSet::new();
    let mut crashes = Vec::new();
    for _ in 0..n_crashes {
        // Half the time go after the initial leader of some group.
        let candidates: Vec<SiteId> = if rng.gen_bool(0.5) {
            items.iter().filter_map(|i| i.replicas.iter().next().copied()).collect()
        } else {
            sites.clone()
        };
        let ok = |s: &SiteId| {
            !crashed.contains(s)
                && items.iter().all(|i| {
                    i.replicas.iter().any(|r| r != s && !crashed.contains(r))
                        || !i.replicas.contains(s)
                })
        };
        if let Some(site) = candidates.iter().copied().filter(ok).choose(&mut rng) {
            crashed.insert(site);
            crashes.push(CrashSpec { site, time: rng.gen_range(0..=horizon + 10) });
        }
    }

    Scenario {
        seed,
        max_delay: rng.gen_range(cfg.max_delay.0..=cfg.max_delay.1),
        leader_strategy: if rng.gen_bool(0.2) {
            LeaderStrategy::SelfLeader
        } else {
            LeaderStrategy::MinAlive
        },
        colocate_leaders: rng.gen_bool(0.3),
        cycle_cap: crate::graph::DEFAULT_CYCLE_CAP,
        suspicion_delay: 10,
        lock_timeout: 40,
        step_cap: 2_000_000,
        sites: sites.into_iter().collect(),
        items,
        txns,
        crashes,
    }
}

/// Result of running and checking one generated scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioOutcome {
    pub index: u64,
    pub seed: u64,
    pub committed: usize,
    pub aborted: usize,
    /// Transactions decided at two or more sites.
    pub multi_site_decisions: usize,
    /// Some group lost its initial weak leader.
    pub leader_crash: bool,
    pub violations: Vec<Violation>,
    pub error: Option<String>,
}

impl ScenarioOutcome {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.violations.is_empty()
    }
}

pub fn run_campaign_scenario(campaign_seed: u64, index: u64, cfg: &CampaignConfig) -> ScenarioOutcome {
    let seed = scenario_seed(campaign_seed, index);
    let sc = random_scenario(seed, cfg);
    let leader_crash = sc
        .crashes
        .iter()
        .any(|c| sc.items.iter().any(|i| i.replicas.iter().next() == Some(&c.site)));
    let mut out = ScenarioOutcome {
        index,
        seed,
        committed: 0,
        aborted: 0,
        multi_site_decisions: 0,
        leader_crash,
        violations: Vec::new(),
        error: None,
    };
    match run(&sc) {
        Ok(trace) => {
            let report = check(&trace);
            let facts = TraceFacts::from_trace(&trace);
            out.committed = report.committed;
            out.aborted = report.aborted;
            out.multi_site_decisions = facts.decisions.values().filter(|d| d.len() >= 2).count();
            out.violations = report.violations;
        }
        Err(e) => out.error = Some(e.to_string()),
    }
    out
}

/// Aggregate over a campaign; outcomes are kept in scenario order.
#[derive(Debug, Clone, Default, Serialize)]
pub struct CampaignSummary {
    pub seed: u64,
    pub outcomes: Vec<ScenarioOutcome>,
}

impl CampaignSummary {
    pub fn failures(&self) -> impl Iterator<Item = &ScenarioOutcome> {
        self.outcomes.iter().filter(|o| !o.passed())
    }

    pub fn render(&self) -> String {
        let n = self.outcomes.len();
        let failed = self.failures().count();
        let sum = |f: fn(&ScenarioOutcome) -> usize| self.outcomes.iter().map(f).sum::<usize>();
        let mut s = format!(
            "campaign seed {}: {} scenarios, {} passed, {} failed\n",
            self.seed,
            n,
            n - failed,
            failed
        );
        s += &format!(
            "committed {}  aborted {}  decided at 2+ sites {}  runs losing an initial leader {}\n",
            sum(|o| o.committed),
            sum(|o| o.aborted),
            sum(|o| o.multi_site_decisions),
            self.outcomes.iter().filter(|o| o.leader_crash).count()
        );
        for o in self.failures() {
            s += &format!("FAIL scenario {} (seed {})\n", o.index, o.seed);
            if let Some(e) = &o.error {
                s += &format!("  error: {e}\n");
            }
            for v in &o.violations {
                s += &format!("  {v}\n");
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_scenarios_are_valid_and_reproducible() {
        let cfg = CampaignConfig::default();
        for i in 0..200 {
            let a = random_scenario(scenario_seed(7, i), &cfg);
            a.replication_map().unwrap();
            assert_eq!(a, random_scenario(scenario_seed(7, i), &cfg));
        }
    }
}
