use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use pregraph::campaign::{run_campaign_scenario, CampaignConfig, CampaignSummary};
use pregraph::checker::{account_messages, check, TraceFacts};
use pregraph::comm::LeaderStrategy;
use pregraph::sim::{run, Scenario};
use pregraph::trace::Trace;

#[derive(Parser)]
#[command(name = "pregraph", version, about = "Simulate and check partially replicated transactions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario file and write its trace.
    Run(RunArgs),
    /// Check a trace for serializability, liveness, agreement and primitive contracts.
    Check {
        trace: PathBuf,
        #[arg(long)]
        report_out: Option<PathBuf>,
    },
    /// Run seeded random scenarios through run and check.
    Campaign(CampaignArgs),
    /// Per-transaction message accounting of a trace.
    Metrics {
        trace: PathBuf,
        /// Operations per transaction, for the closed-form comparison.
        #[arg(long, requires = "d")]
        o: Option<u64>,
        /// Replication degree, for the closed-form comparison.
        #[arg(long, requires = "o")]
        d: Option<u64>,
    },
}

#[derive(Args)]
struct RunArgs {
    scenario: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_delay: Option<u64>,
    #[arg(long)]
    colocate_leaders: bool,
    #[arg(long)]
    leader_strategy: Option<LeaderStrategy>,
    #[arg(long)]
    cycle_cap: Option<usize>,
    /// Defaults to stdout.
    #[arg(long)]
    trace_out: Option<PathBuf>,
}

#[derive(Args)]
struct CampaignArgs {
    #[arg(default_value_t = 1000)]
    count: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML file with generator bounds.
    #[arg(long)]
    template: Option<PathBuf>,
    /// Writes the JSON summary here.
    #[arg(long)]
    report_out: Option<PathBuf>,
}

enum Failure {
    /// Bad input file.
    Parse(anyhow::Error),
    /// A check or the run itself failed.
    Failed(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Failed(e)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PREGRAPH_LOG_LEVEL", "warn"))
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Check { trace, report_out } => cmd_check(&trace, report_out.as_deref()),
        Command::Campaign(args) => cmd_campaign(args),
        Command::Metrics { trace, o, d } => cmd_metrics(&trace, o.zip(d)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Parse(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
        Err(Failure::Failed(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Parse)
}

fn load_trace(path: &Path) -> Result<Trace, Failure> {
    let text = read(path)?;
    Trace::from_ndjson(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(Failure::Parse)
}

fn emit(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => io::stdout().lock().write_all(text.as_bytes()).context("writing stdout"),
    }
}

fn cmd_run(args: RunArgs) -> Result<(), Failure> {
    let text = read(&args.scenario)?;
    let mut sc = Scenario::from_toml(&text)
        .with_context(|| format!("parsing {}", args.scenario.display()))
        .map_err(Failure::Parse)?;
    if let Some(s) = args.seed {
        sc.seed = s;
    }
    if let Some(m) = args.max_delay {
        sc.max_delay = m;
    }
    if args.colocate_leaders {
        sc.colocate_leaders = true;
    }
    if let Some(l) = args.leader_strategy {
        sc.leader_strategy = l;
    }
    if let Some(c) = args.cycle_cap {
        sc.cycle_cap = c;
    }
    // Flags may have made the scenario invalid (max_delay 0, say).
    sc.replication_map().map_err(|e| Failure::Parse(e.into()))?;
    log::info!("running {} with seed {}", args.scenario.display(), sc.seed);
    let trace = run(&sc).context("simulation")?;
    log::info!("{} trace records", trace.records.len());
    emit(args.trace_out.as_deref(), &trace.to_ndjson())?;
    Ok(())
}

fn cmd_check(path: &Path, report_out: Option<&Path>) -> Result<(), Failure> {
    let trace = load_trace(path)?;
    let report = check(&trace);
    let text = report.render();
    print!("{text}");
    if let Some(p) = report_out {
        emit(Some(p), &text)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Failed(anyhow::anyhow!("{} violation(s)", report.violations.len())))
    }
}

fn cmd_campaign(args: CampaignArgs) -> Result<(), Failure> {
    let cfg = match &args.template {
        Some(p) => toml::from_str::<CampaignConfig>(&read(p)?)
            .with_context(|| format!("parsing {}", p.display()))
            .map_err(Failure::Parse)?,
        None => CampaignConfig::default(),
    };
    let outcomes = (0..args.count)
        .into_par_iter()
        .map(|i| {
            let o = run_campaign_scenario(args.seed, i, &cfg);
            if !o.passed() {
                log::warn!("scenario {} (seed {}) failed", o.index, o.seed);
            }
            o
        })
        .collect();
    let summary = CampaignSummary { seed: args.seed, outcomes };
    print!("{}", summary.render());
    if let Some(p) = &args.report_out {
        let json = serde_json::to_string_pretty(&summary).context("serializing summary")?;
        emit(Some(p), &(json + "\n"))?;
    }
    match summary.failures().count() {
        0 => Ok(()),
        n => Err(Failure::Failed(anyhow::anyhow!("{n} scenario(s) failed"))),
    }
}

fn cmd_metrics(path: &Path, od: Option<(u64, u64)>) -> Result<(), Failure> {
    let trace = load_trace(path)?;
    let report = account_messages(&trace);
    print!("{}", report.render());
    let Some((o, d)) = od else { return Ok(()) };
    let read_only = TraceFacts::from_trace(&trace).read_only;
    let mut failed = 0;
    for (t, m) in &report.per_txn {
        if read_only.contains(t) {
            println!("{t}: read-only, committed locally");
            continue;
        }
        let bad = m.check_bounds(o, d);
        if bad.is_empty() {
            println!("{t}: within bounds for o={o} d={d}");
        } else {
            failed += 1;
            println!("{t}: {}", bad.join("; "));
        }
    }
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Failed(anyhow::anyhow!("{failed} transaction(s) outside the bounds")))
    }
}
