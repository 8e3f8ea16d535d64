//! `evaluate`: score an agent (optionally alongside the heuristic
//! baselines) over a scenario set. Summary, traces, and curves are pure
//! functions of the inputs; wall-clock means land in `timing.csv` only.
//! `--load-multipliers` sweeps the generalization axis, one subdirectory
//! per point.

use std::path::PathBuf;

use clap::Args;

use crate::config::{
    canonical_toml, generated_set, input, load_set, sha256_hex, write_manifest, AgentKind,
    CliError, Ctx, Effective,
};
use crate::CommonArgs;
use gridvolt::agents::{Agent, Checkpoint};
use gridvolt::evalharness::{evaluate_suite, split_timing, write_report};

#[derive(Args)]
pub(crate) struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint for learned agents (overrides config).
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Explicit scenario files; overrides eval_files and generation.
    #[arg(long = "scenarios", value_name = "FILE", num_args = 1..)]
    scenario_files: Vec<PathBuf>,
    /// Generated evaluation scenario count (overrides n_eval).
    #[arg(long)]
    n: Option<usize>,
    /// Also score the cafap and no-charging baselines.
    #[arg(long)]
    with_baselines: bool,
    /// Skip per-episode trace files.
    #[arg(long)]
    no_traces: bool,
    /// Comma-separated load multipliers; each writes an lm_<m>
    /// subdirectory (generated scenarios only).
    #[arg(long, value_delimiter = ',', value_name = "M")]
    load_multipliers: Option<Vec<f64>>,
}

pub(crate) fn run(args: EvalArgs) -> Result<(), CliError> {
    let mut cfg = args.common.effective_base()?;
    if let Some(path) = &args.checkpoint {
        cfg.checkpoint = path.display().to_string();
    }
    if let Some(n) = args.n {
        cfg.n_eval = n;
    }
    if !args.scenario_files.is_empty() {
        cfg.eval_files = args
            .scenario_files
            .iter()
            .map(|p| p.display().to_string())
            .collect();
    }
    let eff = Effective::finalize(cfg, "evaluate")?;

    let mut agents = Vec::new();
    match eff.cfg.agent {
        kind @ (AgentKind::PiTd3 | AgentKind::Td3) => {
            if eff.cfg.checkpoint.is_empty() {
                return Err(input(format!(
                    "agent {kind} needs a checkpoint; pass --checkpoint or set `checkpoint`"
                )));
            }
            let ck = Checkpoint::load(eff.cfg.checkpoint.as_ref())
                .ctx(format!("checkpoint {:?}", eff.cfg.checkpoint))?;
            agents.push(ck.agent(kind.as_str()));
        }
        AgentKind::Cafap => agents.push(Agent::Cafap),
        AgentKind::None => agents.push(Agent::NoCharging),
    }
    if args.with_baselines {
        if !matches!(eff.cfg.agent, AgentKind::Cafap) {
            agents.push(Agent::Cafap);
        }
        if !matches!(eff.cfg.agent, AgentKind::None) {
            agents.push(Agent::NoCharging);
        }
    }

    let multipliers = args
        .load_multipliers
        .clone()
        .unwrap_or_else(|| vec![eff.cfg.scenario.load_multiplier]);
    let sweeping = multipliers.len() > 1 || args.load_multipliers.is_some();
    if sweeping && !eff.cfg.eval_files.is_empty() {
        return Err(input(
            "--load-multipliers regenerates scenarios and cannot be combined with \
             explicit scenario files",
        ));
    }

    for &m in &multipliers {
        // Each sweep point is its own effective config, hash and all.
        let mut point_cfg = eff.cfg.clone();
        point_cfg.scenario.load_multiplier = m;
        let point_toml = canonical_toml(&point_cfg)?;
        let point_hash = sha256_hex(&point_toml);

        let scenarios = if point_cfg.eval_files.is_empty() {
            let seed0 = point_cfg.scenario_seed0 + point_cfg.n_train as u64;
            generated_set(&point_cfg.scenario, seed0, point_cfg.n_eval)?
        } else {
            load_set(&point_cfg.eval_files)?
        };

        let (mut table, traces) = evaluate_suite(
            &agents,
            &eff.grid,
            &scenarios,
            &point_cfg.reward,
            eff.workers,
        )?;
        table.config_hash = point_hash.clone();

        let dir = if multipliers.len() > 1 {
            eff.out_dir.join(format!("lm_{m:?}"))
        } else {
            eff.out_dir.clone()
        };
        let kept_traces = if args.no_traces { &[] } else { &traces[..] };
        let files = write_report(&dir, &table, kept_traces, &[])?;
        write_manifest(
            &dir,
            "evaluate",
            &point_hash,
            &point_toml,
            &eff.cfg.seeds,
            vec![format!("load_multiplier={m:?}")],
            &files,
        )?;

        let (main_table, _) = split_timing(&table);
        println!(
            "load multiplier {m:?}: {} scenarios -> {}",
            table.n_scenarios,
            dir.display()
        );
        for row in &main_table.rows {
            println!(
                "  {:<12} {:<22} mean {} std {}",
                row.algorithm, row.metric, row.mean, row.std
            );
        }
    }
    Ok(())
}
