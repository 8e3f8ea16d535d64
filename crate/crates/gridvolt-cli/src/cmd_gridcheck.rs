//! `gridcheck`: verify a grid file before trusting it in a run. Beyond
//! parsing, the file must pass numerical invariants: a tight slack-reduction
//! residual, a flat no-load profile (the format carries no shunt elements),
//! fixed-point vs Newton-Raphson agreement on random feasible loadings, and,
//! for single-load-bus grids, the closed-form voltage solution.

use clap::Args;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{numerical, CliError, Ctx};
use gridvolt::powerflow::gridfile::load_grid;
use gridvolt::powerflow::newton::solve_newton;
use gridvolt::powerflow::{magnitude, solve_fixed_point, BusInjection, GridModel};

#[derive(Args)]
pub(crate) struct GridcheckArgs {
    /// Grid file path or builtin:<name>.
    grid: String,
    /// Random feasible loadings for the solver cross-check.
    #[arg(long, default_value_t = 200)]
    loadings: usize,
    /// Seed for the loading sampler.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fixed-point convergence tolerance.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Maximum allowed |v| disagreement against Newton, p.u.
    #[arg(long, default_value_t = 1e-6)]
    agree: f64,
}

struct Check {
    name: &'static str,
    passed: bool,
    detail: String,
}

pub(crate) fn run(args: GridcheckArgs) -> Result<(), CliError> {
    let grid = load_grid(&args.grid).ctx(format!("grid {:?}", args.grid))?;
    println!(
        "parsed {:?}: {} load buses + slack, v_base {} kV, s_base {} MVA",
        args.grid,
        grid.n_bus,
        grid.v_base / 1e3,
        grid.s_base / 1e6
    );

    let mut checks = Vec::new();
    checks.push(residual_check(&grid));
    checks.push(no_load_check(&grid, args.tol));
    if args.loadings > 0 {
        checks.push(oracle_check(&grid, &args)?);
    }
    if grid.n_bus == 1 {
        checks.push(closed_form_check(&grid, args.seed));
    }

    let mut failed = Vec::new();
    for c in &checks {
        let verdict = if c.passed { "PASS" } else { "FAIL" };
        println!("{:<18} {verdict}  {}", c.name, c.detail);
        if !c.passed {
            failed.push(c.name);
        }
    }
    if failed.is_empty() {
        println!("gridcheck PASS: {:?}", args.grid);
        Ok(())
    } else {
        Err(numerical(format!(
            "gridcheck FAILED: {:?} ({})",
            args.grid,
            failed.join(", ")
        )))
    }
}

fn residual_check(grid: &GridModel) -> Check {
    let r = grid.reduction_residual();
    Check {
        name: "reduction",
        passed: r < 1e-9,
        detail: format!("|L*Y_LL - I| = {r:.3e} (limit 1e-9)"),
    }
}

/// With zero injections the fixed point is the no-load profile itself, and
/// a format without shunts pins that profile to the slack voltage.
fn no_load_check(grid: &GridModel, tol: f64) -> Check {
    let zero = vec![BusInjection::new(0.0, 0.0); grid.n_bus];
    match solve_fixed_point(grid, &zero, 50, tol) {
        Ok(profile) => {
            let dev = profile
                .v
                .iter()
                .map(|z| (magnitude(*z) - 1.0).abs())
                .fold(0.0, f64::max);
            Check {
                name: "no-load",
                passed: profile.converged && dev < 1e-9,
                detail: format!("max | |v| - 1 | = {dev:.3e} (limit 1e-9)"),
            }
        }
        Err(e) => Check {
            name: "no-load",
            passed: false,
            detail: format!("solver error: {e}"),
        },
    }
}

/// Per-bus ranges scaled so total system load sits near 0.5 p.u.: heavy
/// enough to separate the solvers, light enough that most draws converge.
fn loading_ranges(n_bus: usize) -> (f64, f64) {
    (0.5 / n_bus as f64, 0.15 / n_bus as f64)
}

fn sample_loading<R: Rng>(rng: &mut R, n_bus: usize) -> Vec<BusInjection> {
    let (p_max, q_max) = loading_ranges(n_bus);
    (0..n_bus)
        .map(|_| BusInjection::new(rng.gen_range(0.0..p_max), rng.gen_range(-q_max..q_max)))
        .collect()
}

fn oracle_check(grid: &GridModel, args: &GridcheckArgs) -> Result<Check, CliError> {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut accepted = 0usize;
    let mut attempts = 0usize;
    let mut worst = 0.0f64;
    while accepted < args.loadings {
        attempts += 1;
        if attempts > args.loadings * 10 {
            return Ok(Check {
                name: "oracle agreement",
                passed: false,
                detail: format!(
                    "only {accepted}/{attempts} sampled loadings were feasible"
                ),
            });
        }
        let inj = sample_loading(&mut rng, grid.n_bus);
        let fp = match solve_fixed_point(grid, &inj, 50, args.tol) {
            Ok(p) if p.converged => p,
            _ => continue,
        };
        let nr = match solve_newton(grid, &inj, 1e-10) {
            Ok(p) if p.converged => p,
            Ok(_) | Err(_) => {
                return Ok(Check {
                    name: "oracle agreement",
                    passed: false,
                    detail: "Newton failed on a fixed-point-feasible loading".into(),
                });
            }
        };
        for (a, b) in fp.v.iter().zip(nr.v.iter()) {
            worst = worst.max((magnitude(*a) - magnitude(*b)).abs());
        }
        accepted += 1;
    }
    Ok(Check {
        name: "oracle agreement",
        passed: worst <= args.agree,
        detail: format!(
            "{accepted} loadings ({attempts} drawn), max |v| gap {worst:.3e} (limit {:.0e})",
            args.agree
        ),
    })
}

/// One load bus behind one impedance has an exact solution: with
/// u = |v|^2, z = r + jx, and load s = p + jq,
///   u^2 + (2(rp + xq) - 1) u + |z|^2 |s|^2 = 0,
/// and the operating point is the larger root.
fn closed_form_magnitude(z: num_complex::Complex64, p: f64, q: f64) -> Option<f64> {
    let b = 2.0 * (z.re * p + z.im * q) - 1.0;
    let c = z.norm_sqr() * (p * p + q * q);
    let disc = b * b - 4.0 * c;
    if disc < 0.0 {
        return None;
    }
    Some(((-b + disc.sqrt()) / 2.0).sqrt())
}

fn closed_form_check(grid: &GridModel, seed: u64) -> Check {
    // The reduced system of a single load bus is v = z0 + l00 * conj(s/v);
    // the quadratic above assumes the no-load voltage is exactly 1.
    if (grid.z_vec[0] - num_complex::Complex64::new(1.0, 0.0)).norm() > 1e-12 {
        return Check {
            name: "closed form",
            passed: false,
            detail: "no-load voltage is not 1; closed form not applicable".into(),
        };
    }
    let z = grid.l_at(0, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut worst = 0.0f64;
    for _ in 0..25 {
        let inj = sample_loading(&mut rng, 1);
        // Tight tolerance: this check compares solutions, not iterates.
        let fp = match solve_fixed_point(grid, &inj, 200, 1e-13) {
            Ok(p) if p.converged => p,
            _ => continue,
        };
        let Some(exact) = closed_form_magnitude(z, inj[0].p, inj[0].q) else {
            continue;
        };
        worst = worst.max((magnitude(fp.v[0]) - exact).abs());
    }
    Check {
        name: "closed form",
        passed: worst < 1e-9,
        detail: format!("max |v| error vs quadratic solution {worst:.3e} (limit 1e-9)"),
    }
}
