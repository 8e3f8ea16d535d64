//! Per-unit grid model and the Z-bus fixed-point power flow.
//!
//! The network is reduced against its slack bus once at build time: with
//! admittance blocks Y_LL (non-slack square) and Y_Ls (non-slack to slack),
//! the model stores L = Y_LL⁻¹ and the no-load voltages Z = −L·Y_Ls·v_slack.
//! A power-flow solution is then the fixed point of
//!
//!   v ← Z + L·conj(s_inj / v)
//!
//! where s_inj is complex power in the injection convention. Injections are
//! exposed to callers in the load-positive convention of the rest of the
//! crate (loads and EV charging positive, PV and V2G discharge negative) and
//! negated once at the solver boundary, so heavier load depresses voltage.
//!
//! Two solve paths exist: a plain-arithmetic path with a convergence test
//! (evaluation), and a tape-valued path with a fixed sweep count so the
//! recorded graph has static shape (training). Their sweeps mirror each
//! other operation for operation, which keeps values bit-identical. An
//! independent Newton-Raphson solver in [`newton`] serves as the
//! verification oracle.

pub mod gridfile;
pub mod newton;

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

use crate::diffmath::complex::{
    c_abs, c_abs_sq, c_add, c_add_const, c_conj, c_const, c_div, c_mul_const, c_new, DComplex,
};
use crate::diffmath::{DiffError, DNode, Tape};

/// Any intermediate |v| below this is treated as voltage collapse.
pub const COLLAPSE_FLOOR_PU: f64 = 0.1;
/// Accepted solutions must keep |v| strictly below this.
pub const MAGNITUDE_CEILING_PU: f64 = 2.0;
/// Default evaluation-path convergence tolerance on max |Δv|.
pub const DEFAULT_TOL: f64 = 1e-8;
/// Default evaluation-path iteration cap.
pub const DEFAULT_MAX_ITERS: usize = 50;
/// Default training-path sweep count for the unrolled/tape solver.
pub const DEFAULT_FIXED_ITERS: usize = 10;
/// Default sanity bound on |p|, |q| per bus, in p.u.
pub const DEFAULT_MAX_INJECTION_PU: f64 = 10.0;
/// Half-width of the allowed voltage band around 1.0 p.u.
pub const DEFAULT_V_BAND: f64 = 0.05;

#[derive(Debug, Error)]
pub enum PfError {
    #[error("grid file parse error at {source_name}:{line}: {msg}")]
    Parse {
        source_name: String,
        line: usize,
        msg: String,
    },
    #[error("unsupported grid file version: {0:?} (expected \"gridvolt-grid v1\")")]
    UnsupportedVersion(String),
    #[error("grid topology error: {0}")]
    Topology(String),
    #[error("ill-conditioned grid: {0}")]
    IllConditioned(String),
    #[error("invalid injection: {0}")]
    InvalidInjection(String),
    #[error("invalid solver argument: {0}")]
    InvalidArg(&'static str),
    #[error("power flow diverged (voltage collapse) at iteration {iteration}")]
    Divergence { iteration: usize },
    #[error("Newton oracle failure: {0}")]
    OracleFailure(String),
    #[error("tape error in differentiable power flow: {0}")]
    Diff(#[from] DiffError),
    #[error("grid file I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Bus role in the file format and builder input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BusKind {
    Slack,
    Pq,
}

#[derive(Debug, Clone)]
pub struct BusRecord {
    pub name: String,
    pub kind: BusKind,
}

/// One branch with series impedance in per-unit on the system base.
#[derive(Debug, Clone)]
pub struct LineRecord {
    pub from: String,
    pub to: String,
    pub r_pu: f64,
    pub x_pu: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct BaseQuantities {
    pub v_base_v: f64,
    pub s_base_va: f64,
    pub max_injection_pu: f64,
}

impl Default for BaseQuantities {
    fn default() -> Self {
        BaseQuantities {
            v_base_v: 4160.0,
            s_base_va: 1.0e6,
            max_injection_pu: DEFAULT_MAX_INJECTION_PU,
        }
    }
}

/// Complex power drawn at one non-slack bus, load-positive, in p.u.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BusInjection {
    pub p: f64,
    pub q: f64,
}

impl BusInjection {
    pub fn new(p: f64, q: f64) -> Self {
        BusInjection { p, q }
    }
}

/// Solved voltage state for the non-slack buses (the slack is pinned at
/// 1+0j and reported implicitly).
#[derive(Debug, Clone)]
pub struct VoltageProfile {
    pub v: Vec<Complex64>,
    pub iterations_used: usize,
    pub converged: bool,
    /// Last-iteration max |Δv| for the fixed point; final max power mismatch
    /// for the Newton oracle.
    pub max_step: f64,
}

impl VoltageProfile {
    pub fn magnitudes(&self) -> Vec<f64> {
        self.v.iter().map(|z| magnitude(*z)).collect()
    }
}

/// sqrt(re² + im²), spelled out instead of `hypot` so plain-path magnitudes
/// are bit-identical to the tape path's c_abs. Per-unit voltages are O(1);
/// hypot's overflow protection buys nothing here.
pub fn magnitude(z: Complex64) -> f64 {
    (z.re * z.re + z.im * z.im).sqrt()
}

/// Immutable per-unit network model; shareable across threads.
#[derive(Debug, Clone)]
pub struct GridModel {
    /// Non-slack bus count N.
    pub n_bus: usize,
    /// Full (N+1)×(N+1) admittance matrix, slack at index 0.
    pub y_bus: DMatrix<Complex64>,
    /// No-load voltages, length N.
    pub z_vec: Vec<Complex64>,
    /// Reduced impedance matrix Y_LL⁻¹, row-major N×N.
    pub l_mat: Vec<Complex64>,
    pub v_base: f64,
    pub s_base: f64,
    /// Slack first, then non-slack buses in z_vec/l_mat order.
    pub bus_names: Vec<String>,
    pub max_injection_pu: f64,
}

impl GridModel {
    pub fn l_at(&self, row: usize, col: usize) -> Complex64 {
        self.l_mat[row * self.n_bus + col]
    }

    /// Index into the non-slack vectors for a bus name.
    pub fn bus_index(&self, name: &str) -> Option<usize> {
        self.bus_names
            .iter()
            .position(|n| n == name)
            .and_then(|i| i.checked_sub(1))
    }

    /// ‖L·Y_LL − I‖∞ (max row sum), the build-time conditioning residual.
    pub fn reduction_residual(&self) -> f64 {
        let n = self.n_bus;
        let mut worst = 0.0_f64;
        for i in 0..n {
            let mut row_sum = 0.0;
            for j in 0..n {
                let mut acc = Complex64::new(0.0, 0.0);
                for k in 0..n {
                    acc += self.l_at(i, k) * self.y_bus[(k + 1, j + 1)];
                }
                if i == j {
                    acc -= Complex64::new(1.0, 0.0);
                }
                row_sum += acc.norm();
            }
            worst = worst.max(row_sum);
        }
        worst
    }
}

/// Assemble Y from branch records and reduce against the slack bus.
pub fn build_grid(
    buses: &[BusRecord],
    lines: &[LineRecord],
    base: BaseQuantities,
) -> Result<GridModel, PfError> {
    let slack_count = buses.iter().filter(|b| b.kind == BusKind::Slack).count();
    if slack_count != 1 {
        return Err(PfError::Topology(format!(
            "expected exactly one slack bus, found {slack_count}"
        )));
    }
    let mut names: Vec<String> = Vec::with_capacity(buses.len());
    let slack = buses.iter().find(|b| b.kind == BusKind::Slack).unwrap();
    names.push(slack.name.clone());
    for b in buses {
        if b.kind == BusKind::Pq {
            names.push(b.name.clone());
        }
    }
    {
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != names.len() {
            return Err(PfError::Topology("duplicate bus name".into()));
        }
    }
    let index_of = |name: &str| names.iter().position(|n| n == name);
    let n_total = names.len();
    let n = n_total - 1;
    if n == 0 {
        return Err(PfError::Topology("grid needs at least one pq bus".into()));
    }

    let mut y = DMatrix::<Complex64>::zeros(n_total, n_total);
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n_total];
    for line in lines {
        let a = index_of(&line.from).ok_or_else(|| {
            PfError::Topology(format!("line references unknown bus {:?}", line.from))
        })?;
        let b = index_of(&line.to).ok_or_else(|| {
            PfError::Topology(format!("line references unknown bus {:?}", line.to))
        })?;
        if a == b {
            return Err(PfError::Topology(format!(
                "line connects bus {:?} to itself",
                line.from
            )));
        }
        let z = Complex64::new(line.r_pu, line.x_pu);
        if z.norm() == 0.0 {
            return Err(PfError::Topology(format!(
                "line {:?}-{:?} has zero impedance",
                line.from, line.to
            )));
        }
        let ya = 1.0 / z;
        y[(a, a)] += ya;
        y[(b, b)] += ya;
        y[(a, b)] -= ya;
        y[(b, a)] -= ya;
        adj[a].push(b);
        adj[b].push(a);
    }

    // Every bus must be reachable from the slack.
    let mut seen = vec![false; n_total];
    let mut stack = vec![0_usize];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for &j in &adj[i] {
            if !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(PfError::Topology(format!(
            "bus {:?} is not connected to the slack",
            names[i]
        )));
    }

    let y_ll = y.view((1, 1), (n, n)).into_owned();
    let l = y_ll
        .clone()
        .try_inverse()
        .ok_or_else(|| PfError::IllConditioned("reduced admittance matrix is singular".into()))?;
    let v_slack = Complex64::new(1.0, 0.0);
    let mut z_vec = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = Complex64::new(0.0, 0.0);
        for k in 0..n {
            acc += l[(i, k)] * y[(k + 1, 0)];
        }
        z_vec.push(-acc * v_slack);
    }
    let l_mat: Vec<Complex64> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| l[(i, j)])
        .collect();

    let model = GridModel {
        n_bus: n,
        y_bus: y,
        z_vec,
        l_mat,
        v_base: base.v_base_v,
        s_base: base.s_base_va,
        bus_names: names,
        max_injection_pu: base.max_injection_pu,
    };
    let residual = model.reduction_residual();
    if !(residual < 1e-9) {
        return Err(PfError::IllConditioned(format!(
            "slack reduction residual {residual:.3e} exceeds 1e-9"
        )));
    }
    Ok(model)
}

fn validate_injections(grid: &GridModel, inj: &[BusInjection]) -> Result<(), PfError> {
    if inj.len() != grid.n_bus {
        return Err(PfError::InvalidInjection(format!(
            "expected {} bus injections, got {}",
            grid.n_bus,
            inj.len()
        )));
    }
    for (i, b) in inj.iter().enumerate() {
        if !b.p.is_finite() || !b.q.is_finite() {
            return Err(PfError::InvalidInjection(format!(
                "non-finite injection at bus index {i}"
            )));
        }
        if b.p.abs() > grid.max_injection_pu || b.q.abs() > grid.max_injection_pu {
            return Err(PfError::InvalidInjection(format!(
                "injection at bus index {i} exceeds {} p.u.",
                grid.max_injection_pu
            )));
        }
    }
    Ok(())
}

/// One Jacobi sweep of the fixed-point map, written with explicit real
/// component arithmetic in the exact operation order of the tape path so the
/// two stay bit-identical.
fn jacobi_sweep(
    grid: &GridModel,
    s_inj: &[Complex64],
    v: &mut Vec<Complex64>,
    iteration: usize,
) -> Result<f64, PfError> {
    let n = grid.n_bus;
    let mut w = Vec::with_capacity(n);
    for k in 0..n {
        let (vr, vi) = (v[k].re, v[k].im);
        let den = vr * vr + vi * vi;
        if den < COLLAPSE_FLOOR_PU * COLLAPSE_FLOOR_PU {
            return Err(PfError::Divergence { iteration });
        }
        let (sr, si) = (s_inj[k].re, s_inj[k].im);
        // conj(s/v) with the same quotient formula as the tape's c_div.
        let q_re = (sr * vr + si * vi) / den;
        let q_im = (si * vr - sr * vi) / den;
        w.push(Complex64::new(q_re, -q_im));
    }
    let mut max_step = 0.0_f64;
    let mut v_new = Vec::with_capacity(n);
    for i in 0..n {
        let l0 = grid.l_at(i, 0);
        let mut acc_re = w[0].re * l0.re - w[0].im * l0.im;
        let mut acc_im = w[0].re * l0.im + w[0].im * l0.re;
        for k in 1..n {
            let l = grid.l_at(i, k);
            acc_re += w[k].re * l.re - w[k].im * l.im;
            acc_im += w[k].re * l.im + w[k].im * l.re;
        }
        let vi_new = Complex64::new(acc_re + grid.z_vec[i].re, acc_im + grid.z_vec[i].im);
        max_step = max_step.max((vi_new - v[i]).norm());
        v_new.push(vi_new);
    }
    *v = v_new;
    Ok(max_step)
}

/// Evaluation-path solver: iterate until max |Δv| < tol or max_iters.
pub fn solve_fixed_point(
    grid: &GridModel,
    inj: &[BusInjection],
    max_iters: usize,
    tol: f64,
) -> Result<VoltageProfile, PfError> {
    if max_iters < 1 {
        return Err(PfError::InvalidArg("max_iters must be >= 1"));
    }
    if !(tol > 0.0) {
        return Err(PfError::InvalidArg("tol must be > 0"));
    }
    validate_injections(grid, inj)?;
    let s_inj: Vec<Complex64> = inj.iter().map(|b| Complex64::new(-b.p, -b.q)).collect();
    let mut v = vec![Complex64::new(1.0, 0.0); grid.n_bus];
    let mut max_step = f64::INFINITY;
    let mut converged = false;
    let mut used = 0;
    for it in 0..max_iters {
        max_step = jacobi_sweep(grid, &s_inj, &mut v, it)?;
        used = it + 1;
        if max_step < tol {
            converged = true;
            break;
        }
    }
    accept_magnitudes(&v, used)?;
    Ok(VoltageProfile {
        v,
        iterations_used: used,
        converged,
        max_step,
    })
}

/// Training-path value solver: exactly `fixed_iters` sweeps, no early stop.
/// The tape path mirrors this function; values agree bit-for-bit.
pub fn solve_fixed_point_unrolled(
    grid: &GridModel,
    inj: &[BusInjection],
    fixed_iters: usize,
) -> Result<VoltageProfile, PfError> {
    if fixed_iters < 1 {
        return Err(PfError::InvalidArg("fixed_iters must be >= 1"));
    }
    validate_injections(grid, inj)?;
    let s_inj: Vec<Complex64> = inj.iter().map(|b| Complex64::new(-b.p, -b.q)).collect();
    let mut v = vec![Complex64::new(1.0, 0.0); grid.n_bus];
    let mut max_step = f64::INFINITY;
    for it in 0..fixed_iters {
        max_step = jacobi_sweep(grid, &s_inj, &mut v, it)?;
    }
    accept_magnitudes(&v, fixed_iters)?;
    Ok(VoltageProfile {
        v,
        iterations_used: fixed_iters,
        converged: false,
        max_step,
    })
}

fn accept_magnitudes(v: &[Complex64], iteration: usize) -> Result<(), PfError> {
    for z in v {
        let m = magnitude(*z);
        if !(m > 0.0 && m < MAGNITUDE_CEILING_PU) {
            return Err(PfError::Divergence { iteration });
        }
    }
    Ok(())
}

/// Per-iteration max |Δv| trace for contraction diagnostics.
pub fn fixed_point_step_trace(
    grid: &GridModel,
    inj: &[BusInjection],
    iters: usize,
) -> Result<Vec<f64>, PfError> {
    validate_injections(grid, inj)?;
    let s_inj: Vec<Complex64> = inj.iter().map(|b| Complex64::new(-b.p, -b.q)).collect();
    let mut v = vec![Complex64::new(1.0, 0.0); grid.n_bus];
    let mut steps = Vec::with_capacity(iters);
    for it in 0..iters {
        steps.push(jacobi_sweep(grid, &s_inj, &mut v, it)?);
    }
    Ok(steps)
}

/// Tape-valued injections for one non-slack bus, load-positive like
/// [`BusInjection`].
#[derive(Debug, Clone, Copy)]
pub struct DInjection {
    pub p: DNode,
    pub q: DNode,
}

/// Training-path solver on the tape: `fixed_iters` unrolled Jacobi sweeps,
/// returning |v| per non-slack bus as tape nodes.
pub fn solve_fixed_point_diff(
    grid: &GridModel,
    tape: &mut Tape,
    inj: &[DInjection],
    fixed_iters: usize,
) -> Result<Vec<DNode>, PfError> {
    if fixed_iters < 1 {
        return Err(PfError::InvalidArg("fixed_iters must be >= 1"));
    }
    if inj.len() != grid.n_bus {
        return Err(PfError::InvalidInjection(format!(
            "expected {} bus injections, got {}",
            grid.n_bus,
            inj.len()
        )));
    }
    for (i, d) in inj.iter().enumerate() {
        let (p, q) = (tape.value(d.p), tape.value(d.q));
        if !p.is_finite() || !q.is_finite() {
            return Err(PfError::InvalidInjection(format!(
                "non-finite injection at bus index {i}"
            )));
        }
        if p.abs() > grid.max_injection_pu || q.abs() > grid.max_injection_pu {
            return Err(PfError::InvalidInjection(format!(
                "injection at bus index {i} exceeds {} p.u.",
                grid.max_injection_pu
            )));
        }
    }
    let n = grid.n_bus;
    let s_inj: Vec<DComplex> = inj
        .iter()
        .map(|d| {
            let re = tape.neg(d.p);
            let im = tape.neg(d.q);
            c_new(re, im)
        })
        .collect();
    let mut v: Vec<DComplex> = (0..n)
        .map(|_| c_const(tape, Complex64::new(1.0, 0.0)))
        .collect();
    for it in 0..fixed_iters {
        let mut w = Vec::with_capacity(n);
        for k in 0..n {
            let vsq = c_abs_sq(tape, v[k]);
            if tape.value(vsq) < COLLAPSE_FLOOR_PU * COLLAPSE_FLOOR_PU {
                return Err(PfError::Divergence { iteration: it });
            }
            let q = c_div(tape, s_inj[k], v[k])?;
            w.push(c_conj(tape, q));
        }
        let mut v_new = Vec::with_capacity(n);
        for i in 0..n {
            let mut acc = c_mul_const(tape, w[0], grid.l_at(i, 0));
            for (k, wk) in w.iter().enumerate().skip(1) {
                let term = c_mul_const(tape, *wk, grid.l_at(i, k));
                acc = c_add(tape, acc, term);
            }
            v_new.push(c_add_const(tape, acc, grid.z_vec[i]));
        }
        v = v_new;
    }
    let mut mags = Vec::with_capacity(n);
    for vi in &v {
        let m = c_abs(tape, *vi)?;
        let mv = tape.value(m);
        if !(mv > 0.0 && mv < MAGNITUDE_CEILING_PU) {
            return Err(PfError::Divergence {
                iteration: fixed_iters,
            });
        }
        mags.push(m);
    }
    Ok(mags)
}

/// Per-bus violation value min(0, band − |center − |v||): zero inside the
/// allowed band (boundary inclusive), negative with the violation depth
/// outside it.
pub fn violation_terms(profile: &VoltageProfile, v_lo: f64, v_hi: f64) -> Vec<f64> {
    let center = 0.5 * (v_lo + v_hi);
    let band = 0.5 * (v_hi - v_lo);
    profile
        .v
        .iter()
        .map(|z| (band - (center - magnitude(*z)).abs()).min(0.0))
        .collect()
}

/// Tape-valued violation term for one bus magnitude.
pub fn violation_term_diff(tape: &mut Tape, v_mag: DNode, v_lo: f64, v_hi: f64) -> DNode {
    let center = 0.5 * (v_lo + v_hi);
    let band = 0.5 * (v_hi - v_lo);
    let neg_m = tape.neg(v_mag);
    let dev = tape.add_const(neg_m, center);
    let abs_dev = tape.abs(dev);
    let neg_abs = tape.neg(abs_dev);
    let margin = tape.add_const(neg_abs, band);
    tape.min_const(margin, 0.0)
}

/// The 2-bus fixture used across tests: slack "src", one pq bus "b1",
/// z = 0.01 + j0.02 p.u.
pub fn two_bus_fixture() -> GridModel {
    build_grid(
        &[
            BusRecord {
                name: "src".into(),
                kind: BusKind::Slack,
            },
            BusRecord {
                name: "b1".into(),
                kind: BusKind::Pq,
            },
        ],
        &[LineRecord {
            from: "src".into(),
            to: "b1".into(),
            r_pu: 0.01,
            x_pu: 0.02,
        }],
        BaseQuantities::default(),
    )
    .expect("2-bus fixture must build")
}
