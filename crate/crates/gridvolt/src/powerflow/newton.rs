//! Polar Newton-Raphson power flow, the verification oracle for the
//! fixed-point solver.
//!
//! Standard textbook formulation on the same per-unit model: unknowns are
//! (θ, V) at every PQ bus, the slack is pinned at 1∠0, and each iteration
//! solves the full 2N×2N Jacobian system against the active/reactive power
//! mismatches. Nothing here shares code with the fixed-point path beyond the
//! admittance matrix itself, which is what makes the agreement tests a
//! genuine cross-check.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use super::{BusInjection, GridModel, PfError, VoltageProfile, MAGNITUDE_CEILING_PU};

const MAX_NEWTON_ITERS: usize = 60;

/// Solve the same injections as [`super::solve_fixed_point`] by Newton-Raphson.
/// Converged solutions satisfy max |power mismatch| < tol at every PQ bus.
pub fn solve_newton(
    grid: &GridModel,
    inj: &[BusInjection],
    tol: f64,
) -> Result<VoltageProfile, PfError> {
    if !(tol > 0.0) {
        return Err(PfError::InvalidArg("tol must be > 0"));
    }
    super::validate_injections(grid, inj)?;
    let n = grid.n_bus;
    let y = &grid.y_bus;
    // Injection-convention specified powers (loads are stored load-positive).
    let p_spec: Vec<f64> = inj.iter().map(|b| -b.p).collect();
    let q_spec: Vec<f64> = inj.iter().map(|b| -b.q).collect();

    // Bus 0 is the slack: theta[0] = 0, vm[0] = 1 throughout.
    let mut theta = vec![0.0_f64; n + 1];
    let mut vm = vec![1.0_f64; n + 1];

    let mut converged = false;
    let mut iterations_used = 0;
    let mut max_mismatch = f64::INFINITY;
    for it in 0..MAX_NEWTON_ITERS {
        // Calculated injections at PQ buses.
        let mut p_calc = vec![0.0_f64; n + 1];
        let mut q_calc = vec![0.0_f64; n + 1];
        for i in 0..=n {
            let mut p = 0.0;
            let mut q = 0.0;
            for j in 0..=n {
                let g = y[(i, j)].re;
                let b = y[(i, j)].im;
                let th = theta[i] - theta[j];
                let (s, c) = th.sin_cos();
                p += vm[j] * (g * c + b * s);
                q += vm[j] * (g * s - b * c);
            }
            p_calc[i] = vm[i] * p;
            q_calc[i] = vm[i] * q;
        }

        let mut mismatch = DVector::<f64>::zeros(2 * n);
        max_mismatch = 0.0;
        for i in 1..=n {
            let dp = p_spec[i - 1] - p_calc[i];
            let dq = q_spec[i - 1] - q_calc[i];
            mismatch[i - 1] = dp;
            mismatch[n + i - 1] = dq;
            max_mismatch = max_mismatch.max(dp.abs()).max(dq.abs());
        }
        iterations_used = it;
        if max_mismatch < tol {
            converged = true;
            break;
        }

        // Standard polar Jacobian blocks: [H N; M L]·[Δθ; ΔV] = [ΔP; ΔQ].
        let mut jac = DMatrix::<f64>::zeros(2 * n, 2 * n);
        for i in 1..=n {
            for j in 1..=n {
                let g = y[(i, j)].re;
                let b = y[(i, j)].im;
                if i == j {
                    jac[(i - 1, j - 1)] = -q_calc[i] - b * vm[i] * vm[i];
                    jac[(i - 1, n + j - 1)] = p_calc[i] / vm[i] + g * vm[i];
                    jac[(n + i - 1, j - 1)] = p_calc[i] - g * vm[i] * vm[i];
                    jac[(n + i - 1, n + j - 1)] = q_calc[i] / vm[i] - b * vm[i];
                } else {
                    let th = theta[i] - theta[j];
                    let (s, c) = th.sin_cos();
                    let vivj = vm[i] * vm[j];
                    jac[(i - 1, j - 1)] = vivj * (g * s - b * c);
                    jac[(i - 1, n + j - 1)] = vm[i] * (g * c + b * s);
                    jac[(n + i - 1, j - 1)] = -vivj * (g * c + b * s);
                    jac[(n + i - 1, n + j - 1)] = vm[i] * (g * s - b * c);
                }
            }
        }
        let lu = jac.lu();
        let dx = lu
            .solve(&mismatch)
            .ok_or_else(|| PfError::OracleFailure("singular Jacobian".into()))?;
        if !dx.iter().all(|x| x.is_finite()) {
            return Err(PfError::OracleFailure("non-finite Newton step".into()));
        }
        for i in 1..=n {
            theta[i] += dx[i - 1];
            vm[i] += dx[n + i - 1];
            if !(vm[i] > 0.0 && vm[i] < MAGNITUDE_CEILING_PU) {
                return Err(PfError::Divergence { iteration: it });
            }
        }
    }

    let v: Vec<Complex64> = (1..=n)
        .map(|i| Complex64::from_polar(vm[i], theta[i]))
        .collect();
    Ok(VoltageProfile {
        v,
        iterations_used,
        converged,
        max_step: max_mismatch,
    })
}
