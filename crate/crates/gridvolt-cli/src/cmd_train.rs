//! `train`: one training run per seed over a deterministic worker pool.
//! Writes per-seed learning curves and both the best-evaluated and final
//! checkpoints; `--resume` continues a single run, counters and all.

use std::path::PathBuf;

use clap::Args;

use crate::config::{
    collect_pool, input, run_pool, write_manifest, CliError, Ctx, Effective,
};
use crate::CommonArgs;
use gridvolt::agents::{Checkpoint, Trainer, TrainerConfig};
use gridvolt::evalharness::export_curves_csv;

#[derive(Args)]
pub(crate) struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Training epochs, one episode each (overrides config).
    #[arg(long)]
    epochs: Option<usize>,
    /// Rollout horizon K (overrides trainer.k_rollout).
    #[arg(long)]
    k_rollout: Option<usize>,
    /// Resume a single run from this checkpoint; hyperparameters and
    /// counters come from the checkpoint, not the config.
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,
}

struct SeedOutcome {
    seed: u64,
    env_steps: u64,
    grad_steps: u64,
    best_eval: Option<f64>,
    files: Vec<PathBuf>,
}

pub(crate) fn run(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = args.common.effective_base()?;
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if let Some(k) = args.k_rollout {
        cfg.trainer.k_rollout = k;
    }
    if !cfg.agent.is_learned() {
        return Err(input(format!(
            "agent {} is not trainable; pick pi-td3 or td3",
            cfg.agent
        )));
    }
    cfg.trainer.physics_rollout = cfg.agent == crate::config::AgentKind::PiTd3;
    let eff = Effective::finalize(cfg, "train")?;

    let resume = match &args.resume {
        Some(path) => {
            if eff.cfg.seeds.len() != 1 {
                return Err(input("--resume continues exactly one run; give one seed"));
            }
            Some(Checkpoint::load(path).ctx(path.display())?)
        }
        None => None,
    };

    let train_set = eff.train_set()?;
    let eval_set = eff.eval_set()?;
    std::fs::create_dir_all(&eff.out_dir).ctx(eff.out_dir.display())?;

    let epochs = eff.cfg.epochs;
    let outcomes = collect_pool(run_pool(eff.cfg.seeds.len(), eff.workers, |j| {
        let mut trainer = match &resume {
            Some(ck) => Trainer::from_checkpoint(
                eff.grid.clone(),
                train_set.clone(),
                eval_set.clone(),
                ck.clone(),
            )?,
            None => {
                let tcfg = TrainerConfig {
                    seed: eff.cfg.seeds[j],
                    ..eff.cfg.trainer.clone()
                };
                Trainer::new(
                    eff.grid.clone(),
                    train_set.clone(),
                    eval_set.clone(),
                    eff.cfg.reward.clone(),
                    tcfg,
                )?
            }
        };
        // Resumed runs keep the checkpoint's own seed label.
        let seed = trainer.config().seed;
        let report = trainer.train(epochs).ctx(format!("training seed {seed}"))?;
        let mut files = Vec::new();
        let best_path = eff.out_dir.join(format!("checkpoint_{seed}.json"));
        report.best.save(&best_path).ctx(best_path.display())?;
        files.push(best_path);
        if epochs > 0 {
            let last_path = eff.out_dir.join(format!("checkpoint_{seed}_last.json"));
            report.last.save(&last_path).ctx(last_path.display())?;
            files.push(last_path);
            let curve_path = eff.out_dir.join(format!("curves_{seed}.csv"));
            std::fs::write(&curve_path, export_curves_csv(&report.curve))
                .ctx(curve_path.display())?;
            files.push(curve_path);
        }
        Ok(SeedOutcome {
            seed,
            env_steps: report.last.env_steps,
            grad_steps: report.last.grad_steps,
            best_eval: report
                .curve
                .iter()
                .map(|p| p.eval_mean)
                .fold(None, |acc: Option<f64>, v| {
                    Some(acc.map_or(v, |a| a.max(v)))
                }),
            files,
        })
    }))?;

    let all_files: Vec<PathBuf> = outcomes.iter().flat_map(|o| o.files.clone()).collect();
    write_manifest(
        &eff.out_dir,
        "train",
        &eff.hash,
        &eff.toml,
        &eff.cfg.seeds,
        Vec::new(),
        &all_files,
    )?;
    for o in &outcomes {
        match o.best_eval {
            Some(best) => println!(
                "seed {}: {} epochs, env_steps {}, grad_steps {}, best eval mean {best}",
                o.seed, epochs, o.env_steps, o.grad_steps
            ),
            None => println!(
                "seed {}: {} epochs, env_steps {}, grad_steps {}, no evaluation points",
                o.seed, epochs, o.env_steps, o.grad_steps
            ),
        }
    }
    println!("wrote {} files to {}", all_files.len() + 1, eff.out_dir.display());
    Ok(())
}
