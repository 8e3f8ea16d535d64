//! `gridvolt`: scenario generation, training, evaluation, grid verification,
//! and the rollout-horizon benchmark behind one binary.
//!
//! Every command is a pure function of (config file, flags, seeds) to output
//! bytes; wall-clock measurements are segregated into `timing.csv`. Exit
//! codes: 0 success, 2 bad config or input, 3 numerical failure.

mod cmd_bench;
mod cmd_evaluate;
mod cmd_gen;
mod cmd_gridcheck;
mod cmd_train;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{AgentKind, CliError, RunConfig};

#[derive(Parser)]
#[command(
    name = "gridvolt",
    version,
    about = "EV smart-charging simulator, trainer, and evaluation harness"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write deterministic scenario files from the scenario config.
    GenScenarios(cmd_gen::GenArgs),
    /// Train the selected agent, one run per seed, writing curves and
    /// checkpoints.
    Train(cmd_train::TrainArgs),
    /// Score an agent over scenarios; writes summary, traces, and timing.
    Evaluate(cmd_evaluate::EvalArgs),
    /// Train one physics-rollout run per (K, seed) and tabulate finals.
    BenchmarkK(cmd_bench::BenchArgs),
    /// Verify a grid file: parse, reduction residual, no-load profile, and
    /// solver cross-checks.
    Gridcheck(cmd_gridcheck::GridcheckArgs),
}

#[derive(Args)]
pub(crate) struct CommonArgs {
    /// Run configuration file (TOML); defaults apply when omitted.
    #[arg(long, value_name = "FILE")]
    pub(crate) config: Option<PathBuf>,
    /// Output directory (overrides config and GRIDVOLT_OUT_ROOT).
    #[arg(long, value_name = "DIR")]
    pub(crate) out: Option<PathBuf>,
    /// Grid file path or builtin:<name> (overrides config).
    #[arg(long)]
    pub(crate) grid: Option<String>,
    /// Agent type (overrides config).
    #[arg(long, value_enum)]
    pub(crate) agent: Option<AgentKind>,
    /// Comma-separated seed list (overrides config).
    #[arg(long, value_delimiter = ',')]
    pub(crate) seeds: Option<Vec<u64>>,
    /// Worker threads; 0 means machine parallelism (overrides config).
    #[arg(long)]
    pub(crate) workers: Option<usize>,
}

impl CommonArgs {
    /// Load the config file and fold the shared flags in.
    pub(crate) fn effective_base(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.display().to_string();
        }
        if let Some(grid) = &self.grid {
            cfg.grid = grid.clone();
        }
        if let Some(agent) = self.agent {
            cfg.agent = agent;
        }
        if let Some(seeds) = &self.seeds {
            cfg.seeds = seeds.clone();
        }
        if let Some(workers) = self.workers {
            cfg.workers = workers;
        }
        Ok(cfg)
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenScenarios(args) => cmd_gen::run(args),
        Cmd::Train(args) => cmd_train::run(args),
        Cmd::Evaluate(args) => cmd_evaluate::run(args),
        Cmd::BenchmarkK(args) => cmd_bench::run(args),
        Cmd::Gridcheck(args) => cmd_gridcheck::run(args),
    };
    if let Err(e) = result {
        eprintln!("gridvolt: {e}");
        std::process::exit(e.exit_code());
    }
}
