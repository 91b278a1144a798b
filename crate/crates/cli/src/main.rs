use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use v2g_core::baselines::BaselineKind;
use v2g_core::config::RunConfig;
use v2g_core::run::{self, DispatchSource, EvaluationReport};
use v2g_core::Error;

#[derive(Parser)]
#[command(name = "v2g", version, about = "Multi-aggregator V2G scheduling: training, evaluation and baselines")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration with flat namespaced keys; omitted keys keep defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the master seed and the evaluation day seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `output_dir` from the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct Source {
    /// Model or training checkpoint to dispatch with.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Baseline to dispatch with: bl1..bl4.
    #[arg(long)]
    baseline: Option<String>,
    /// Ask every aggregator for zero power.
    #[arg(long)]
    idle: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the EV fleet and write fleet.csv.
    GenFleet(Common),
    /// Train the policies; writes checkpoint.json, model.json and training_log.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from checkpoint.json in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Run one scheduling day and write the report and its series.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
    },
    /// Repeat one dispatched day for a year and write the mean SOH series.
    SimulateYear {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: Source,
    },
    /// Run baselines; all four when no kind is given, each in its own subdirectory.
    Baseline {
        #[command(flatten)]
        common: Common,
        /// bl1..bl4
        #[arg(long)]
        kind: Option<String>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Checkpoint(_) | Error::Invalid(_) | Error::Dimension { .. } => 2,
        Error::Numeric(_) | Error::Terminal => 3,
        Error::Csv(_) | Error::Json(_) | Error::Io(_) => 4,
    }
}

fn setup(common: &Common) -> v2g_core::Result<(RunConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
        cfg.eval.seed = seed;
    }
    cfg.validate()?;
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, out))
}

fn source(s: &Source) -> v2g_core::Result<DispatchSource> {
    Ok(match (&s.checkpoint, &s.baseline) {
        (Some(path), _) => DispatchSource::Policy(run::load_model(path)?),
        (_, Some(name)) => DispatchSource::Baseline(BaselineKind::parse(name)?),
        _ => DispatchSource::Idle,
    })
}

fn summary(r: &EvaluationReport, out: &Path) {
    println!(
        "{}: variance {:.3} kW², EV cost {:.3}, one-year SOH {:.4} %, DSO total {:.3} -> {}",
        r.source,
        r.one_day_load_variance,
        r.one_day_ev_cost,
        r.one_year_soh,
        r.dso_breakdown.dso_total,
        out.display()
    );
}

fn execute(cmd: Command) -> v2g_core::Result<()> {
    match cmd {
        Command::GenFleet(common) => {
            let (cfg, out) = setup(&common)?;
            let path = run::gen_fleet(&cfg, &out)?;
            println!("{} EVs -> {}", cfg.fleet.count, path.display());
        }
        Command::Train { common, resume } => {
            let (cfg, out) = setup(&common)?;
            let log = run::train(&cfg, &out, resume)?;
            match log.rows.last() {
                Some(row) => println!(
                    "{} iterations, last mean return {:.5}, cost rate {:.3} -> {}",
                    log.rows.len(),
                    row.mean_return,
                    row.cost_rate,
                    out.display()
                ),
                None => println!("no iterations run -> {}", out.display()),
            }
        }
        Command::Evaluate { common, source: s } => {
            let (cfg, out) = setup(&common)?;
            let report = run::evaluate(&cfg, &source(&s)?, &out)?;
            summary(&report, &out);
        }
        Command::SimulateYear { common, source: s } => {
            let (cfg, out) = setup(&common)?;
            let series = run::simulate_year_cmd(&cfg, &source(&s)?, &out)?;
            println!(
                "mean SOH {:.4} % -> {:.4} % over {} days -> {}",
                series[0],
                series[series.len() - 1],
                series.len() - 1,
                out.display()
            );
        }
        Command::Baseline { common, kind } => {
            let (cfg, out) = setup(&common)?;
            match kind {
                Some(name) => {
                    let report = run::baseline(&cfg, BaselineKind::parse(&name)?, &out)?;
                    summary(&report, &out);
                }
                None => {
                    for kind in BaselineKind::ALL {
                        let dir = out.join(kind.label());
                        let report = run::baseline(&cfg, kind, &dir)?;
                        summary(&report, &dir);
                    }
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
