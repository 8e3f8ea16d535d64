//! `benchmark-k`: the rollout-horizon ablation. Trains one physics-rollout
//! run per (K, seed) on a shared scenario set and emits aligned curve files
//! plus a finals table, so the K curves are directly comparable.

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::Args;

use crate::config::{
    collect_pool, input, run_pool, write_manifest, CliError, Ctx, Effective,
};
use crate::CommonArgs;
use gridvolt::agents::{Trainer, TrainerConfig};
use gridvolt::evalharness::export_curves_csv;

#[derive(Args)]
pub(crate) struct BenchArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Rollout horizons to compare.
    #[arg(long, value_delimiter = ',', default_value = "5,10,20,40")]
    k_list: Vec<usize>,
    /// Training epochs per run (overrides config).
    #[arg(long)]
    epochs: Option<usize>,
}

struct RunOutcome {
    k: usize,
    seed: u64,
    best_eval: f64,
    final_eval: f64,
    curve_path: PathBuf,
}

pub(crate) fn run(args: BenchArgs) -> Result<(), CliError> {
    let mut cfg = args.common.effective_base()?;
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    // The ablation varies K of the physics rollout; the agent field is
    // irrelevant here and pinned for the hash.
    cfg.agent = crate::config::AgentKind::PiTd3;
    cfg.trainer.physics_rollout = true;
    let eff = Effective::finalize(cfg, "benchmark-k")?;
    if args.k_list.is_empty() {
        return Err(input("--k-list needs at least one K"));
    }

    let train_set = eff.train_set()?;
    let eval_set = eff.eval_set()?;
    std::fs::create_dir_all(&eff.out_dir).ctx(eff.out_dir.display())?;

    // K-major job grid: all seeds of K_0, then all seeds of K_1, ...
    let seeds = &eff.cfg.seeds;
    let jobs = args.k_list.len() * seeds.len();
    let epochs = eff.cfg.epochs;
    let outcomes = collect_pool(run_pool(jobs, eff.workers, |j| {
        let k = args.k_list[j / seeds.len()];
        let seed = seeds[j % seeds.len()];
        let tcfg = TrainerConfig {
            seed,
            k_rollout: k,
            ..eff.cfg.trainer.clone()
        };
        let mut trainer = Trainer::new(
            eff.grid.clone(),
            train_set.clone(),
            eval_set.clone(),
            eff.cfg.reward.clone(),
            tcfg,
        )
        .ctx(format!("K={k} seed {seed}"))?;
        let report = trainer
            .train(epochs)
            .ctx(format!("training K={k} seed {seed}"))?;
        let (final_eval, _) = trainer.evaluate().ctx(format!("K={k} seed {seed}"))?;
        let best_eval = report
            .curve
            .iter()
            .map(|p| p.eval_mean)
            .fold(final_eval, f64::max);
        let curve_path = eff.out_dir.join(format!("curves_k{k}_{seed}.csv"));
        std::fs::write(&curve_path, export_curves_csv(&report.curve))
            .ctx(curve_path.display())?;
        Ok(RunOutcome {
            k,
            seed,
            best_eval,
            final_eval,
            curve_path,
        })
    }))?;

    let mut finals = String::from("k,seed,final_eval_mean,best_eval_mean\n");
    for o in &outcomes {
        let _ = writeln!(
            finals,
            "{},{},{:?},{:?}",
            o.k, o.seed, o.final_eval, o.best_eval
        );
    }
    let finals_path = eff.out_dir.join("kbench.csv");
    std::fs::write(&finals_path, finals).ctx(finals_path.display())?;

    let mut files: Vec<PathBuf> = outcomes.iter().map(|o| o.curve_path.clone()).collect();
    files.push(finals_path.clone());
    let sweep = args.k_list.iter().map(|k| format!("k={k}")).collect();
    write_manifest(
        &eff.out_dir,
        "benchmark-k",
        &eff.hash,
        &eff.toml,
        seeds,
        sweep,
        &files,
    )?;

    for o in &outcomes {
        println!(
            "K={:<3} seed {}: final eval mean {}, best {}",
            o.k, o.seed, o.final_eval, o.best_eval
        );
    }
    println!("finals table: {}", finals_path.display());
    Ok(())
}
