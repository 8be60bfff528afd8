use pregraph::sim::{run, Scenario};
use pregraph::trace::TraceEvent;

const ONE_SITE: &str = r#"
seed = 1
sites = [0]

[[items]]
id = 0
replicas = [0]

[[txns]]
id = 1
origin = 0
arrival = 0
ops = [{ item = 0, write = "aa" }]
"#;

#[test]
fn single_site_update_commits() {
    let sc = Scenario::from_toml(ONE_SITE).unwrap();
    let trace = run(&sc).unwrap();
    assert!(trace
        .events()
        .any(|e| matches!(e, TraceEvent::TxnCommit { txn, read_only: false, .. } if txn.0 == 1)));
}

#[test]
fn simulated_trace_survives_ndjson() {
    let mut sc = Scenario::from_toml(ONE_SITE).unwrap();
    sc.sites.insert(pregraph::model::SiteId(1));
    sc.items[0].replicas.insert(pregraph::model::SiteId(1));
    let trace = run(&sc).unwrap();
    let back = pregraph::trace::Trace::from_ndjson(&trace.to_ndjson()).unwrap();
    assert_eq!(back, trace);
}

#[test]
fn single_replica_commit_has_no_network_delay() {
    let trace = run(&Scenario::from_toml(ONE_SITE).unwrap()).unwrap();
    let m = &pregraph::checker::account_messages(&trace).per_txn[&pregraph::model::TxnId(1)];
    assert_eq!(m.critical_path, Some(0));
    assert!(m.check_bounds(1, 1).is_empty(), "{:?}", m.check_bounds(1, 1));
}

#[test]
fn leader_crash_scenario_still_decides_everywhere() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../scenarios/leader_crash.toml");
    let sc = Scenario::from_toml(&std::fs::read_to_string(path).unwrap()).unwrap();
    let trace = run(&sc).unwrap();
    let report = pregraph::checker::check(&trace);
    assert!(report.passed(), "{}", report.render());
    assert!(trace.events().any(|e| matches!(e, TraceEvent::Crash { .. })));
    assert!(report.committed >= 1);
}
