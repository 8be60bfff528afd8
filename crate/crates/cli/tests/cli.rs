use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pregraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pregraph"))
        .args(args)
        .env_remove("PREGRAPH_LOG_LEVEL")
        .output()
        .expect("binary runs")
}

fn scenario(name: &str) -> String {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "scenarios", name].iter().collect();
    p.to_str().unwrap().to_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn run_to(dir: &Path, name: &str, extra: &[&str]) -> String {
    let out = dir.join(format!("{name}.ndjson"));
    let out_s = out.to_str().unwrap().to_owned();
    let sc = scenario(name);
    let mut args = vec!["run", sc.as_str(), "--trace-out", out_s.as_str()];
    args.extend_from_slice(extra);
    let o = pregraph(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out_s
}

#[test]
fn run_then_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let trace = run_to(dir.path(), "basic.toml", &[]);
    let o = pregraph(&["check", &trace]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("serializability  PASS"));
}

#[test]
fn run_is_reproducible_and_flags_apply() {
    let dir = tempfile::tempdir().unwrap();
    let a = fs::read_to_string(run_to(dir.path(), "basic.toml", &["--seed", "9"])).unwrap();
    let b = pregraph(&["run", &scenario("basic.toml"), "--seed", "9"]);
    assert_eq!(stdout(&b), a);
    let c = pregraph(&["run", &scenario("basic.toml"), "--colocate-leaders", "--leader-strategy", "self"]);
    let first = stdout(&c).lines().next().unwrap().to_owned();
    assert!(first.contains("\"leader_strategy\":\"self\""), "{first}");
    assert!(first.contains("\"colocate_leaders\":true"), "{first}");
}

#[test]
fn flipped_decision_fails_with_agreement_counterexample() {
    let dir = tempfile::tempdir().unwrap();
    let trace = run_to(dir.path(), "basic.toml", &[]);
    let text = fs::read_to_string(&trace).unwrap();
    let line = text.lines().find(|l| l.contains("\"event\":\"txn_commit\"")).unwrap();
    let flipped = line
        .replace("txn_commit", "txn_abort")
        .replace(",\"read_only\":false", ",\"reason\":\"cycle\"");
    let tampered = dir.path().join("tampered.ndjson");
    fs::write(&tampered, text.replacen(line, &flipped, 1)).unwrap();
    let o = pregraph(&["check", tampered.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert!(out.contains("agreement        FAIL"), "{out}");
    assert!(out.contains("DecisionDisagreement"), "{out}");
}

#[test]
fn exit_codes_for_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = \"x\"\n").unwrap();
    assert_eq!(pregraph(&["run", bad.to_str().unwrap()]).status.code(), Some(3));
    assert_eq!(pregraph(&["run", &scenario("basic.toml"), "--max-delay", "0"]).status.code(), Some(3));
    let garbage = dir.path().join("garbage.ndjson");
    fs::write(&garbage, "{not json}\n").unwrap();
    assert_eq!(pregraph(&["check", garbage.to_str().unwrap()]).status.code(), Some(3));
    assert_eq!(pregraph(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(pregraph(&["metrics", "x", "--o", "1"]).status.code(), Some(2));
    assert_eq!(
        pregraph(&["run", &scenario("basic.toml"), "--leader-strategy", "max"]).status.code(),
        Some(2)
    );
}

#[test]
fn campaign_summary_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let tpl = dir.path().join("tpl.toml");
    fs::write(&tpl, "sites = [3, 5]\ntxns = [5, 10]\n").unwrap();
    let report = dir.path().join("report.json");
    let args = ["campaign", "60", "--seed", "42", "--template", tpl.to_str().unwrap()];
    let mut with_report = args.to_vec();
    with_report.extend(["--report-out", report.to_str().unwrap()]);
    let a = pregraph(&with_report);
    assert_eq!(a.status.code(), Some(0), "{}", stdout(&a));
    assert!(stdout(&a).starts_with("campaign seed 42: 60 scenarios, 60 passed, 0 failed"));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["outcomes"].as_array().unwrap().len(), 60);
    let b = pregraph(&args);
    assert_eq!(stdout(&a), stdout(&b));

    fs::write(&tpl, "sites = [3, 5]\nunknown = 1\n").unwrap();
    assert_eq!(pregraph(&args).status.code(), Some(3));
}

#[test]
fn metrics_checks_closed_forms() {
    let dir = tempfile::tempdir().unwrap();
    let trace = run_to(dir.path(), "remote_origin.toml", &[]);
    let o = pregraph(&["metrics", &trace, "--o", "1", "--d", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("T1: within bounds for o=1 d=3"), "{out}");
    let row = out.lines().find(|l| l.starts_with("T1 ")).unwrap();
    assert_eq!(row.split_whitespace().collect::<Vec<_>>(), ["T1", "6", "6", "9", "0", "0", "21", "5"]);
    let o = pregraph(&["metrics", &trace, "--o", "2", "--d", "3"]);
    assert_eq!(o.status.code(), Some(1));
}
