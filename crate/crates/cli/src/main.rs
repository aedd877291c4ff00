//! `flift` — federated finetuning experiments for tiny Transformers.
//!
//! Subcommands:
//!   pretrain   centrally pretrain each configured architecture
//!   cost       emit per-architecture resource cost tables (CSV)
//!   select     pick the architecture + per-device trained layers
//!   run        execute federated runs, one per seed
//!   report     aggregate per-seed summaries into mean ± std
//!
//! Exit codes: 0 success, 2 configuration error, 3 infeasible
//! constraints, 4 numerical failure.

mod commands;
mod config;
mod out;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flift_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "flift",
    version,
    about = "Resource-constrained federated finetuning of tiny Transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Centrally pretrain each configured architecture and write checkpoints
    Pretrain(Common),
    /// Write per-architecture resource cost tables as CSV
    Cost(Common),
    /// Pick the architecture and per-device trained layer counts for a scenario
    Select(Common),
    /// Execute federated runs (one per seed); writes metrics, summary, checkpoint
    Run(RunArgs),
    /// Aggregate per-seed run summaries into mean and standard deviation
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Replace the config's seed list with this single seed
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory (overrides the config's `out`)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker threads for in-round client training (falls back to the
    /// FLIFT_THREADS environment variable, then to all cores)
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Run the seed sweep in parallel instead of sequentially
    #[arg(long)]
    parallel_seeds: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Infeasible(_) => 3,
        Error::Numerical(_) => 4,
        _ => 2,
    }
}

fn init_threads(flag: Option<usize>) -> Result<()> {
    let threads = match flag {
        Some(n) => Some(n),
        None => match std::env::var("FLIFT_THREADS") {
            Ok(v) => Some(v.parse::<usize>().map_err(|_| {
                Error::config(format!(
                    "environment variable FLIFT_THREADS: `{v}` is not an unsigned integer"
                ))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::config("thread count must be >= 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn load_config(common: &Common) -> Result<config::ExperimentConfig> {
    let text = fs::read_to_string(&common.config).map_err(|e| {
        Error::config(format!(
            "cannot read config {}: {e}",
            common.config.display()
        ))
    })?;
    let mut cfg = config::load(&text)?;
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Cmd::Pretrain(c) | Cmd::Cost(c) | Cmd::Select(c) | Cmd::Report(c) => c,
        Cmd::Run(r) => &r.common,
    };
    init_threads(common.threads)?;
    let cfg = load_config(common)?;
    match &cli.command {
        Cmd::Pretrain(_) => commands::cmd_pretrain(&cfg),
        Cmd::Cost(_) => commands::cmd_cost(&cfg),
        Cmd::Select(_) => commands::cmd_select(&cfg),
        Cmd::Run(r) => commands::cmd_run(&cfg, r.parallel_seeds),
        Cmd::Report(_) => commands::cmd_report(&cfg),
    }
}
