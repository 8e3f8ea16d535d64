//! `gen-scenarios`: write n scenario files with consecutive seeds. Pure in
//! (config, seed0, n); rerunning reproduces every byte.

use clap::Args;

use crate::config::{stamped_scenario, CliError, Ctx, Effective};
use crate::CommonArgs;
use gridvolt::scenario::generate_scenario;

#[derive(Args)]
pub(crate) struct GenArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// How many scenario files to write.
    #[arg(long, default_value_t = 50)]
    n: usize,
    /// First scenario seed; files get seed0..seed0+n-1.
    #[arg(long)]
    seed0: Option<u64>,
    /// Uniform base-load scaling (overrides scenario.load_multiplier).
    #[arg(long)]
    load_multiplier: Option<f64>,
}

pub(crate) fn run(args: GenArgs) -> Result<(), CliError> {
    let mut cfg = args.common.effective_base()?;
    if let Some(m) = args.load_multiplier {
        cfg.scenario.load_multiplier = m;
    }
    let eff = Effective::finalize(cfg, "scenarios")?;
    let seed0 = args.seed0.unwrap_or(eff.cfg.scenario_seed0);
    if args.n == 0 {
        println!("0 scenarios requested; nothing written");
        return Ok(());
    }
    std::fs::create_dir_all(&eff.out_dir).ctx(eff.out_dir.display())?;
    for i in 0..args.n as u64 {
        let seed = seed0 + i;
        let traj = generate_scenario(&eff.cfg.scenario, seed)
            .ctx(format!("generating scenario seed {seed}"))?;
        let path = eff.out_dir.join(format!("scenario_{seed}.scn"));
        std::fs::write(&path, stamped_scenario(&traj, &eff.hash)).ctx(path.display())?;
    }
    println!(
        "wrote {} scenario files (seeds {seed0}..={}) to {}",
        args.n,
        seed0 + args.n as u64 - 1,
        eff.out_dir.display()
    );
    Ok(())
}
