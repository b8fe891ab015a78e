//! `msrlab`: batch experiments over budget-constrained market scoring rules.
//!
//! Exit codes: 0 when every assertion holds, 1 when an assertion fails, 2 on
//! a configuration error (in which case no output files are written).

mod config;
mod experiments;

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use msrlab::lab::{verify_certificate, Certificate};
use msrlab::msr::{read_jsonl, replay, write_jsonl, MarketConfig};
use msrlab::ScoringRule;
use serde::Serialize;

use config::{Experiment, ExperimentConfig, Outcomes, Overrides};

#[derive(Parser)]
#[command(name = "msrlab", version, about = "Batch experiments over budget-constrained market scoring rules")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its CSV rows and certificates.
    Run(RunArgs),
    /// Re-check a JSON certificate.
    Verify { certificate: PathBuf },
    /// Re-execute a JSONL ledger and re-derive its payoffs.
    LedgerReplay(ReplayArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    experiment: Option<Experiment>,
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    rule: Option<String>,
    #[arg(long)]
    floor: Option<f64>,
    /// Outcome count, or "product" for the two-by-two product space.
    #[arg(long)]
    k: Option<Outcomes>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Also write a gnuplot script next to the CSV.
    #[arg(long)]
    gnuplot_script: bool,
}

#[derive(clap::Args)]
struct ReplayArgs {
    /// JSON market description: rule, optional floor, initial, mechanism.
    #[arg(long)]
    market: PathBuf,
    #[arg(long)]
    ledger: PathBuf,
    /// Override the market's mechanism ("msr" or "ssm").
    #[arg(long)]
    mechanism: Option<String>,
    /// Settle at this outcome after the replay.
    #[arg(long)]
    outcome: Option<usize>,
    #[arg(long, default_value = config::DEFAULT_OUT_DIR)]
    out_dir: PathBuf,
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome = Result<bool, Failure>;

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn runtime_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Run(args) => run(args),
        Command::Verify { certificate } => verify(&certificate),
        Command::LedgerReplay(args) => ledger_replay(args),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Sizes the global pool from `MSRLAB_THREADS` when it is set.
fn init_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("MSRLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| config_err(anyhow!("MSRLAB_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(config_err)
}

fn run(args: RunArgs) -> Outcome {
    let file = match &args.config {
        Some(path) => Overrides::from_file(path).map_err(config_err)?,
        None => Overrides::default(),
    };
    let flags = Overrides {
        experiment: args.experiment,
        rule: args.rule,
        floor: args.floor,
        k: args.k,
        seed: args.seed,
        trials: args.trials,
        threshold: args.threshold,
        out_dir: args.out_dir,
        gnuplot_script: args.gnuplot_script.then_some(true),
    };
    let cfg = ExperimentConfig::try_from(file.merged(flags)).map_err(config_err)?;
    let report = experiments::run(&cfg).map_err(runtime_err)?;

    let tag = cfg.experiment.tag();
    let shape = match cfg.outcomes {
        Outcomes::Simplex(k) => format!("k{k}"),
        Outcomes::Product => "product".to_string(),
    };
    let stem = format!("{tag}-{}-{shape}", cfg.rule.spec().rule);
    let mut files = vec![(format!("{stem}.csv"), report.csv)];
    if let Some(cert) = &report.certificate {
        files.push((format!("{stem}-certificate.json"), pretty(cert).map_err(runtime_err)?));
    }
    if cfg.gnuplot_script {
        files.push((format!("{stem}.gp"), gnuplot(&stem, report.plot).into_bytes()));
    }
    write_outputs(&cfg.out_dir, &files)?;
    println!("{} {stem}: {}", verdict(report.passed), report.summary);
    Ok(report.passed)
}

fn verify(path: &Path) -> Outcome {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(config_err)?;
    let cert: Certificate = serde_json::from_str(&text)
        .with_context(|| format!("parsing certificate {}", path.display()))
        .map_err(config_err)?;
    let check = verify_certificate(&cert).map_err(config_err)?;
    for failure in &check.failures {
        println!("  {failure}");
    }
    println!("{} {}", verdict(check.passed), path.display());
    Ok(check.passed)
}

#[derive(Serialize)]
struct ReplayRow<'a> {
    index: usize,
    agent_id: &'a str,
    scale: f64,
    stored_payoff: Option<f64>,
    replayed_payoff: Option<f64>,
    matches: bool,
}

fn ledger_replay(args: ReplayArgs) -> Outcome {
    let text = fs::read_to_string(&args.market)
        .with_context(|| format!("reading {}", args.market.display()))
        .map_err(config_err)?;
    let mut market: MarketConfig = serde_json::from_str(&text)
        .with_context(|| format!("parsing market {}", args.market.display()))
        .map_err(config_err)?;
    if let Some(m) = args.mechanism {
        market.mechanism = m;
    }
    let state = market.build().map_err(config_err)?;
    let ledger = fs::File::open(&args.ledger)
        .with_context(|| format!("opening {}", args.ledger.display()))
        .map_err(config_err)?;
    let records = read_jsonl(BufReader::new(ledger)).map_err(config_err)?;
    if let Some(x) = args.outcome {
        if x >= state.rule().outcomes() {
            return Err(config_err(anyhow!("outcome {x} out of range")));
        }
    }

    let result =
        replay(state.rule().clone(), state.initial().clone(), state.mechanism(), &records, args.outcome)
            .map_err(runtime_err)?;
    let rows: Vec<ReplayRow> = records
        .iter()
        .zip(result.state.ledger())
        .enumerate()
        .map(|(i, (stored, fresh))| ReplayRow {
            index: i,
            agent_id: &fresh.agent_id,
            scale: fresh.scale,
            stored_payoff: stored.realized_payoff,
            replayed_payoff: fresh.realized_payoff,
            matches: !result.mismatches.contains(&i),
        })
        .collect();
    let mut csv_out = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        csv_out.serialize(row).map_err(runtime_err)?;
    }
    let csv_bytes = csv_out.into_inner().map_err(|e| runtime_err(e.into_error()))?;
    let mut jsonl = Vec::new();
    write_jsonl(result.state.ledger(), &mut jsonl).map_err(runtime_err)?;

    let invariant = match result.settlement {
        Some(_) => result.state.check_path_invariance().map_err(runtime_err)?.passed,
        None => true,
    };
    write_outputs(
        &args.out_dir,
        &[("replay.csv".to_string(), csv_bytes), ("replay.jsonl".to_string(), jsonl)],
    )?;
    let passed = result.mismatches.is_empty() && invariant;
    println!(
        "{} ledger-replay ({}): {} records, {} mismatches, largest payoff difference {:e}",
        verdict(passed),
        state.mechanism().tag(),
        records.len(),
        result.mismatches.len(),
        result.max_payoff_diff
    );
    Ok(passed)
}

fn verdict(passed: bool) -> &'static str {
    if passed {
        "PASS"
    } else {
        "FAIL"
    }
}

fn pretty<T: Serialize>(value: &T) -> anyhow::Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

fn gnuplot(stem: &str, (x, y): (&str, &str)) -> String {
    format!(
        "set datafile separator ','\n\
         set key autotitle columnhead\n\
         set xlabel '{x}'\n\
         set ylabel '{y}'\n\
         set terminal pngcairo size 900,600\n\
         set output '{stem}.png'\n\
         plot '{stem}.csv' using '{x}':'{y}' with points pointtype 7 pointsize 0.5 title '{stem}'\n"
    )
}

/// An unwritable output location counts as a configuration error.
fn write_outputs(dir: &Path, files: &[(String, Vec<u8>)]) -> Result<(), Failure> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(config_err)?;
    for (name, bytes) in files {
        let path = dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display())).map_err(config_err)?;
    }
    Ok(())
}
