//! The charging MDP: observation assembly, the step pipeline (fleet action,
//! per-bus aggregation, power flow, reward, arrivals/departures, cursor
//! advance), and the tape-valued K-step rollout used by physics-informed
//! actor updates.
//!
//! Sign conventions follow the solver throughout: consumption is positive,
//! PV and V2G discharge negative. The reward uses the canonical convention
//! in which voltage violations, energy purchases, and unmet departure SoC
//! all strictly reduce reward.

use crate::diffmath::{DNode, DiffError, Tape};
use crate::fleet::{apply_action, apply_action_diff, DepartedSession, EVSession, Fleet};
use crate::powerflow::{
    solve_fixed_point, solve_fixed_point_diff, solve_fixed_point_unrolled, violation_terms,
    BusInjection, DInjection, GridModel, PfError, VoltageProfile, DEFAULT_MAX_ITERS, DEFAULT_TOL,
};
use crate::scenario::ExogenousTrajectory;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("environment config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("power flow diverged at rollout step {at_step}")]
    RolloutDivergence { at_step: usize },
    #[error("invalid argument: {0}")]
    InvalidArg(&'static str),
    #[error(transparent)]
    Pf(#[from] PfError),
    #[error(transparent)]
    Fleet(#[from] crate::fleet::FleetError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Reward weights and shape parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Weight on the voltage-violation magnitude sum (negative).
    pub lambda1: f64,
    /// Weight on the trading term.
    pub lambda2: f64,
    /// Weight on the departure-shortfall sum (negative).
    pub lambda3: f64,
    /// Half-width of the allowed voltage band around 1 p.u.
    pub v_band: f64,
    /// Departure SoC target as a fraction.
    pub soc_target: f64,
    /// Steps-to-departure threshold for the shortfall indicator.
    pub eps_steps: usize,
    /// Step length in hours.
    pub dt_hours: f64,
    /// Reward assigned to a step whose power flow diverges.
    pub divergence_penalty: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda1: -5e4,
            lambda2: 1.0,
            lambda3: -10.0,
            v_band: 0.05,
            soc_target: 0.9,
            eps_steps: 8,
            dt_hours: 0.25,
            divergence_penalty: -1e6,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.v_band > 0.0) {
            return Err(EnvError::ConfigMismatch("v_band must be positive".into()));
        }
        if !(self.soc_target > 0.0 && self.soc_target <= 1.0) {
            return Err(EnvError::ConfigMismatch(
                "soc_target must be in (0, 1]".into(),
            ));
        }
        if self.eps_steps < 1 {
            return Err(EnvError::ConfigMismatch("eps_steps must be >= 1".into()));
        }
        if !(self.dt_hours > 0.0) {
            return Err(EnvError::ConfigMismatch("dt_hours must be positive".into()));
        }
        Ok(())
    }
}

/// Power-flow mode of the plain step path. The tape rollout always unrolls.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum PfMode {
    /// Evaluation path: iterate to tolerance.
    Tolerance { max_iters: usize, tol: f64 },
    /// Training path: exactly this many sweeps, matching the tape.
    Unrolled { fixed_iters: usize },
}

impl Default for PfMode {
    fn default() -> Self {
        PfMode::Tolerance {
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub reward: RewardConfig,
    pub pf: PfMode,
}

/// Per-charger result of one step.
#[derive(Debug, Clone, Default)]
pub struct ChargerOutcome {
    pub occupied: bool,
    pub soc_new: f64,
    /// Steps remaining after this action (t_depart - (t+1)).
    pub t_left_after: usize,
    pub p_ch_kw: f64,
    pub p_dis_kw: f64,
}

/// Additive reward components; `total` is exactly their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RewardBreakdown {
    pub violation: f64,
    pub trading: f64,
    pub satisfaction: f64,
    pub divergence: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub t: usize,
    pub reward: f64,
    pub breakdown: RewardBreakdown,
    /// Voltage magnitudes per non-slack bus; empty if the flow diverged.
    pub voltages: Vec<f64>,
    /// Per-bus band terms min(0, band - |1 - |v||); empty if diverged.
    pub violations: Vec<f64>,
    /// Net energy cost of this step, EUR (purchases minus feed-in revenue).
    pub cost_eur: f64,
    pub chargers: Vec<ChargerOutcome>,
    pub departed: Vec<DepartedSession>,
    pub done: bool,
    pub diverged: bool,
    /// Action entries clipped or sanitized this step.
    pub clipped: usize,
}

/// Canonical reward. `v_mags` is empty only for diverged steps (handled by
/// the caller). Components: lambda1 (negative) times the nonnegative
/// violation magnitude sum, lambda2 times net trading revenue, lambda3
/// (negative) times the departure shortfall sum.
pub fn compute_reward(
    cfg: &RewardConfig,
    v_mags: &[f64],
    price_ch: f64,
    price_dis: f64,
    chargers: &[ChargerOutcome],
) -> RewardBreakdown {
    let mut vi_sum = 0.0;
    for &m in v_mags {
        let dev = {
            let d = 1.0 - m;
            if d < 0.0 {
                -d
            } else {
                d
            }
        };
        let term = {
            let x = cfg.v_band - dev;
            if x < 0.0 {
                x
            } else {
                0.0
            }
        };
        vi_sum += -term;
    }
    let violation = cfg.lambda1 * vi_sum;

    let mut net = 0.0;
    for c in chargers {
        net += price_dis * c.p_dis_kw - price_ch * c.p_ch_kw;
    }
    let trading = net * (cfg.lambda2 * cfg.dt_hours);

    let mut psi_sum = 0.0;
    for c in chargers {
        if c.occupied && c.t_left_after < cfg.eps_steps {
            let d = cfg.soc_target - c.soc_new;
            psi_sum += if d > 0.0 { d } else { 0.0 };
        }
    }
    let satisfaction = cfg.lambda3 * psi_sum;

    RewardBreakdown {
        violation,
        trading,
        satisfaction,
        divergence: 0.0,
        total: violation + trading + satisfaction,
    }
}

/// The environment. Cloning is cheap-ish (fleet vector copy) and yields an
/// independent simulator sharing the immutable grid and trajectory.
#[derive(Debug, Clone)]
pub struct Env {
    grid: Arc<GridModel>,
    trajectory: Arc<ExogenousTrajectory>,
    cfg: EnvConfig,
    fleet: Fleet,
    t: usize,
    done: bool,
    clip_count: u64,
}

impl Env {
    pub fn new(
        grid: Arc<GridModel>,
        trajectory: Arc<ExogenousTrajectory>,
        cfg: EnvConfig,
    ) -> Result<Self, EnvError> {
        cfg.reward.validate()?;
        if grid.n_bus != trajectory.n_bus {
            return Err(EnvError::ConfigMismatch(format!(
                "grid has {} non-slack buses, trajectory was generated for {}",
                grid.n_bus, trajectory.n_bus
            )));
        }
        if let Some(&bad) = trajectory.charger_bus.iter().find(|&&b| b >= grid.n_bus) {
            return Err(EnvError::ConfigMismatch(format!(
                "charger assigned to bus index {bad} outside 0..{}",
                grid.n_bus
            )));
        }
        if (trajectory.dt_hours - cfg.reward.dt_hours).abs() > 1e-12 {
            return Err(EnvError::ConfigMismatch(format!(
                "trajectory dt {} differs from reward dt {}",
                trajectory.dt_hours, cfg.reward.dt_hours
            )));
        }
        let mut env = Self {
            grid,
            fleet: Fleet::new(&trajectory.charger_bus),
            trajectory,
            cfg,
            t: 0,
            done: false,
            clip_count: 0,
        };
        env.fleet
            .process_arrivals_departures(0, &env.trajectory.sessions)?;
        Ok(env)
    }

    /// Rebuild an environment positioned at step `t` with the given
    /// per-charger SoC (entries for unoccupied chargers are ignored). Used to
    /// restart rollouts from stored replay states.
    pub fn restore(
        grid: Arc<GridModel>,
        trajectory: Arc<ExogenousTrajectory>,
        cfg: EnvConfig,
        t: usize,
        soc: &[f64],
    ) -> Result<Self, EnvError> {
        if t >= trajectory.horizon() {
            return Err(EnvError::InvalidArg("restore step beyond horizon"));
        }
        if soc.len() != trajectory.n_chargers() {
            return Err(EnvError::ConfigMismatch(format!(
                "soc vector has {} entries for {} chargers",
                soc.len(),
                trajectory.n_chargers()
            )));
        }
        let mut env = Self::new(grid, trajectory, cfg)?;
        env.t = t;
        env.fleet = Fleet::new(&env.trajectory.charger_bus);
        for session in &env.trajectory.sessions {
            if session.t_arrival <= t && t < session.t_depart {
                let c = &mut env.fleet.chargers[session.charger_id];
                c.session = Some(session.clone());
                c.soc = soc[session.charger_id];
            }
        }
        Ok(env)
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn horizon(&self) -> usize {
        self.trajectory.horizon()
    }

    pub fn n_chargers(&self) -> usize {
        self.fleet.len()
    }

    pub fn n_bus(&self) -> usize {
        self.grid.n_bus
    }

    pub fn grid(&self) -> &Arc<GridModel> {
        &self.grid
    }

    pub fn trajectory(&self) -> &Arc<ExogenousTrajectory> {
        &self.trajectory
    }

    pub fn fleet(&self) -> &Fleet {
        &self.fleet
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    /// Observation layout: [sin h, cos h, price_ch, p per bus, q per bus,
    /// SoC per charger, steps-to-departure per charger, bus index per
    /// charger]; length 3 + 2N + 3|I|. Powers are the exogenous (load + PV)
    /// per-unit values of the current frame, consumption positive.
    pub fn obs_dim(&self) -> usize {
        3 + 2 * self.grid.n_bus + 3 * self.fleet.len()
    }

    /// Per-charger SoC entering the current step (0 where unoccupied), the
    /// hidden state a replay buffer must store to restart simulation here.
    pub fn soc_snapshot(&self) -> Vec<f64> {
        self.fleet
            .chargers
            .iter()
            .map(|c| if c.occupied() { c.soc } else { 0.0 })
            .collect()
    }

    fn inv_s_base_kw(&self) -> f64 {
        1000.0 / self.grid.s_base
    }

    pub fn observation(&self) -> Vec<f64> {
        let t = self.t.min(self.trajectory.horizon() - 1);
        let frame = &self.trajectory.frames[t];
        let inv = self.inv_s_base_kw();
        let mut obs = Vec::with_capacity(self.obs_dim());
        let angle = 2.0 * std::f64::consts::PI * frame.hour / 24.0;
        obs.push(angle.sin());
        obs.push(angle.cos());
        obs.push(frame.price_ch);
        for b in 0..self.grid.n_bus {
            obs.push((frame.p_load_kw[b] + frame.p_pv_kw[b]) * inv);
        }
        for b in 0..self.grid.n_bus {
            obs.push(frame.q_load_kvar[b] * inv);
        }
        for c in &self.fleet.chargers {
            obs.push(if c.occupied() { c.soc } else { 0.0 });
        }
        for c in &self.fleet.chargers {
            let t_left = match &c.session {
                Some(s) => s.t_depart.saturating_sub(self.t),
                None => 0,
            };
            obs.push(t_left as f64);
        }
        for c in &self.fleet.chargers {
            obs.push(c.bus_index as f64);
        }
        obs
    }

    /// Total action entries clipped or sanitized so far.
    pub fn clip_count(&self) -> u64 {
        self.clip_count
    }

    fn sanitize_action(a: f64, clipped: &mut usize) -> f64 {
        if !a.is_finite() {
            *clipped += 1;
            return 0.0;
        }
        if a < -1.0 {
            *clipped += 1;
            -1.0
        } else if a > 1.0 {
            *clipped += 1;
            1.0
        } else {
            a
        }
    }

    /// Advance one step. Divergence of the power flow terminates the episode
    /// with the configured penalty instead of erroring.
    pub fn step(&mut self, actions: &[f64]) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::InvalidArg("step on a finished episode"));
        }
        if actions.len() != self.fleet.len() {
            return Err(EnvError::ConfigMismatch(format!(
                "action vector has {} entries for {} chargers",
                actions.len(),
                self.fleet.len()
            )));
        }
        let t = self.t;
        let frame = &self.trajectory.frames[t];
        let dt = self.cfg.reward.dt_hours;
        let mut clipped = 0usize;

        // 1) Apply fleet actions; 2) aggregate EV power per bus.
        let mut chargers = Vec::with_capacity(self.fleet.len());
        let mut ev_kw = vec![0.0; self.grid.n_bus];
        for (i, c) in self.fleet.chargers.iter_mut().enumerate() {
            let a = Self::sanitize_action(actions[i], &mut clipped);
            let (soc_new, p_ch, p_dis) = apply_action(c, a, dt);
            let occupied = c.occupied();
            if occupied {
                c.soc = soc_new;
            }
            let t_left_after = match &c.session {
                Some(s) => s.t_depart.saturating_sub(t + 1),
                None => 0,
            };
            ev_kw[c.bus_index] += p_ch - p_dis;
            chargers.push(ChargerOutcome {
                occupied,
                soc_new,
                t_left_after,
                p_ch_kw: p_ch,
                p_dis_kw: p_dis,
            });
        }
        self.clip_count += clipped as u64;

        // 3) Complex injections in per-unit, consumption positive.
        let inv = self.inv_s_base_kw();
        let inj: Vec<BusInjection> = (0..self.grid.n_bus)
            .map(|b| {
                let p = (frame.p_load_kw[b] + frame.p_pv_kw[b] + ev_kw[b]) * inv;
                let q = frame.q_load_kvar[b] * inv;
                BusInjection::new(p, q)
            })
            .collect();

        // 4) Power flow.
        let solved: Result<VoltageProfile, PfError> = match self.cfg.pf {
            PfMode::Tolerance { max_iters, tol } => {
                solve_fixed_point(&self.grid, &inj, max_iters, tol)
            }
            PfMode::Unrolled { fixed_iters } => {
                solve_fixed_point_unrolled(&self.grid, &inj, fixed_iters)
            }
        };
        let profile = match solved {
            Ok(p) => p,
            Err(PfError::Divergence { .. }) => {
                self.done = true;
                let penalty = self.cfg.reward.divergence_penalty;
                return Ok(StepOutcome {
                    t,
                    reward: penalty,
                    breakdown: RewardBreakdown {
                        divergence: penalty,
                        total: penalty,
                        ..RewardBreakdown::default()
                    },
                    voltages: Vec::new(),
                    violations: Vec::new(),
                    cost_eur: 0.0,
                    chargers,
                    departed: Vec::new(),
                    done: true,
                    diverged: true,
                    clipped,
                });
            }
            Err(other) => return Err(other.into()),
        };

        // 5) Reward.
        let v_mags = profile.magnitudes();
        let breakdown = compute_reward(
            &self.cfg.reward,
            &v_mags,
            frame.price_ch,
            frame.price_dis,
            &chargers,
        );
        let band = self.cfg.reward.v_band;
        let violations = violation_terms(&profile, 1.0 - band, 1.0 + band);
        let cost_eur = dt
            * chargers
                .iter()
                .map(|c| frame.price_ch * c.p_ch_kw - frame.price_dis * c.p_dis_kw)
                .sum::<f64>();

        // 6) Departures and arrivals for the next step; 7) advance cursor.
        let t_next = t + 1;
        let mut departed = self
            .fleet
            .process_arrivals_departures(t_next, &self.trajectory.sessions)?;
        let done = t_next == self.trajectory.horizon();
        if done {
            departed.extend(self.fleet.force_depart_all(t_next));
            self.done = true;
        }
        self.t = t_next;

        Ok(StepOutcome {
            t,
            reward: breakdown.total,
            breakdown,
            voltages: v_mags,
            violations,
            cost_eur,
            chargers,
            departed,
            done,
            diverged: false,
            clipped,
        })
    }
}

/// A policy that can emit tape-valued actions from tape-valued observations.
pub trait TapePolicy {
    fn act_tape(&self, tape: &mut Tape, obs: &[DNode]) -> Result<Vec<DNode>, DiffError>;
}

/// A critic that can score a tape-valued (observation, action) pair.
pub trait TapeCritic {
    fn q_tape(&self, tape: &mut Tape, obs: &[DNode], act: &[DNode]) -> Result<DNode, DiffError>;
}

/// Result of a differentiable rollout. `objective` is the tape node holding
/// sum_j gamma^j r_j (+ gamma^K Q at the bootstrap state when the segment
/// does not end the episode).
pub struct RolloutOutcome {
    pub objective: DNode,
    pub steps: usize,
    pub bootstrapped: bool,
    /// Forward values of the per-step rewards and actions, for dual-path
    /// verification.
    pub reward_values: Vec<f64>,
    pub action_values: Vec<Vec<f64>>,
}

/// K-step differentiable rollout from the env's current state. Exogenous
/// values enter as tape constants, so gradients flow only through the
/// policy, the transition, the reward, and the bootstrap critic. The plain
/// path with `PfMode::Unrolled { fixed_iters }` reproduces these forward
/// values bit-for-bit.
pub fn rollout_diff<P: TapePolicy, C: TapeCritic>(
    env: &Env,
    tape: &mut Tape,
    policy: &P,
    critic: &C,
    k: usize,
    gamma: f64,
    fixed_iters: usize,
) -> Result<RolloutOutcome, EnvError> {
    if k < 1 {
        return Err(EnvError::InvalidArg("rollout length must be >= 1"));
    }
    if env.done {
        return Err(EnvError::InvalidArg("rollout from a finished episode"));
    }
    let horizon = env.trajectory.horizon();
    if env.t + k > horizon {
        return Err(EnvError::InvalidArg("rollout extends beyond the horizon"));
    }
    let grid = &env.grid;
    let rcfg = &env.cfg.reward;
    let dt = rcfg.dt_hours;
    let inv = env.inv_s_base_kw();

    // Local tape-valued fleet mirror: session, SoC node, efficiency.
    let mut slots: Vec<Option<(EVSession, DNode, f64)>> = env
        .fleet
        .chargers
        .iter()
        .map(|c| {
            c.session
                .as_ref()
                .map(|s| (s.clone(), tape.constant(c.soc), c.efficiency))
        })
        .collect();

    let obs_at = |tape: &mut Tape, t: usize, slots: &[Option<(EVSession, DNode, f64)>]| {
        let frame = &env.trajectory.frames[t];
        let mut obs: Vec<DNode> = Vec::with_capacity(env.obs_dim());
        let angle = 2.0 * std::f64::consts::PI * frame.hour / 24.0;
        obs.push(tape.constant(angle.sin()));
        obs.push(tape.constant(angle.cos()));
        obs.push(tape.constant(frame.price_ch));
        for b in 0..grid.n_bus {
            let v = (frame.p_load_kw[b] + frame.p_pv_kw[b]) * inv;
            obs.push(tape.constant(v));
        }
        for b in 0..grid.n_bus {
            obs.push(tape.constant(frame.q_load_kvar[b] * inv));
        }
        for slot in slots {
            match slot {
                Some((_, node, _)) => obs.push(*node),
                None => obs.push(tape.constant(0.0)),
            }
        }
        for slot in slots {
            let t_left = match slot {
                Some((s, _, _)) => s.t_depart.saturating_sub(t),
                None => 0,
            };
            obs.push(tape.constant(t_left as f64));
        }
        for c in &env.fleet.chargers {
            obs.push(tape.constant(c.bus_index as f64));
        }
        obs
    };

    let mut objective: Option<DNode> = None;
    let mut gamma_pow = 1.0;
    let mut reward_values = Vec::with_capacity(k);
    let mut action_values = Vec::with_capacity(k);
    let mut t = env.t;

    for j in 0..k {
        let frame = &env.trajectory.frames[t];
        let obs = obs_at(tape, t, &slots);
        let actions = policy.act_tape(tape, &obs)?;
        if actions.len() != slots.len() {
            return Err(EnvError::ConfigMismatch(format!(
                "policy emitted {} actions for {} chargers",
                actions.len(),
                slots.len()
            )));
        }
        action_values.push(actions.iter().map(|&a| tape.value(a)).collect());

        // Fleet transition and per-bus aggregation, charger order.
        let mut ev_nodes: Vec<DNode> = (0..grid.n_bus).map(|_| tape.constant(0.0)).collect();
        let mut outcomes: Vec<Option<(DNode, DNode, DNode)>> = Vec::with_capacity(slots.len());
        for (i, slot) in slots.iter().enumerate() {
            match slot {
                Some((session, soc, eta)) => {
                    let (soc_new, p_ch, p_dis) =
                        apply_action_diff(tape, session, *eta, *soc, actions[i], dt)?;
                    let bus = env.fleet.chargers[i].bus_index;
                    let net = tape.sub(p_ch, p_dis);
                    ev_nodes[bus] = tape.add(ev_nodes[bus], net);
                    outcomes.push(Some((soc_new, p_ch, p_dis)));
                }
                None => outcomes.push(None),
            }
        }

        // Injections and unrolled power flow on the tape.
        let mut inj = Vec::with_capacity(grid.n_bus);
        for b in 0..grid.n_bus {
            let exo = frame.p_load_kw[b] + frame.p_pv_kw[b];
            let p_kw = tape.add_const(ev_nodes[b], exo);
            let p = tape.mul_const(p_kw, inv);
            let q = tape.constant(frame.q_load_kvar[b] * inv);
            inj.push(DInjection { p, q });
        }
        let mags = solve_fixed_point_diff(grid, tape, &inj, fixed_iters).map_err(|e| match e {
            PfError::Divergence { .. } => EnvError::RolloutDivergence { at_step: j },
            other => EnvError::Pf(other),
        })?;

        // Violation sum (nonnegative magnitudes).
        let mut vi_sum = tape.constant(0.0);
        for &m in &mags {
            let neg_m = tape.neg(m);
            let dev_signed = tape.add_const(neg_m, 1.0);
            let dev = tape.abs(dev_signed);
            let neg_dev = tape.neg(dev);
            let slack = tape.add_const(neg_dev, rcfg.v_band);
            let term = tape.min_const(slack, 0.0);
            let mag = tape.neg(term);
            vi_sum = tape.add(vi_sum, mag);
        }
        let violation = tape.mul_const(vi_sum, rcfg.lambda1);

        // Trading and shortfall sums in charger order.
        let mut net = tape.constant(0.0);
        let mut psi_sum = tape.constant(0.0);
        for (i, outcome) in outcomes.iter().enumerate() {
            let Some((soc_new, p_ch, p_dis)) = outcome else {
                continue;
            };
            let rev = tape.mul_const(*p_dis, frame.price_dis);
            let buy = tape.mul_const(*p_ch, frame.price_ch);
            let term = tape.sub(rev, buy);
            net = tape.add(net, term);

            let session = &slots[i].as_ref().unwrap().0;
            let t_left_after = session.t_depart.saturating_sub(t + 1);
            if t_left_after < rcfg.eps_steps {
                let neg_soc = tape.neg(*soc_new);
                let d = tape.add_const(neg_soc, rcfg.soc_target);
                let psi = tape.max_const(d, 0.0);
                psi_sum = tape.add(psi_sum, psi);
            }
        }
        let trading = tape.mul_const(net, rcfg.lambda2 * dt);
        let satisfaction = tape.mul_const(psi_sum, rcfg.lambda3);

        let vt = tape.add(violation, trading);
        let reward = tape.add(vt, satisfaction);
        reward_values.push(tape.value(reward));

        let discounted = tape.mul_const(reward, gamma_pow);
        objective = Some(match objective {
            Some(acc) => tape.add(acc, discounted),
            None => discounted,
        });

        // Advance the tape fleet to t+1: commit SoC, then departures and
        // arrivals (arriving SoC is an exogenous constant).
        for (slot, outcome) in slots.iter_mut().zip(&outcomes) {
            if let (Some((_, soc, _)), Some((soc_new, _, _))) = (slot.as_mut(), outcome) {
                *soc = *soc_new;
            }
        }
        let t_next = t + 1;
        for slot in slots.iter_mut() {
            if slot.as_ref().is_some_and(|(s, _, _)| s.t_depart == t_next) {
                *slot = None;
            }
        }
        for session in &env.trajectory.sessions {
            if session.t_arrival == t_next && t_next < horizon {
                let c = session.charger_id;
                if slots[c].is_some() {
                    return Err(crate::fleet::FleetError::OverlappingSessions {
                        charger_id: c,
                        t: t_next,
                    }
                    .into());
                }
                let soc = tape.constant(session.e_arrival / session.e_max);
                slots[c] = Some((
                    session.clone(),
                    soc,
                    env.fleet.chargers[c].efficiency,
                ));
            }
        }
        gamma_pow *= gamma;
        t = t_next;
    }

    // Bootstrap with the critic unless the segment ended the episode.
    let bootstrapped = t < horizon;
    let mut objective = objective.expect("k >= 1");
    if bootstrapped {
        let obs = obs_at(tape, t, &slots);
        let actions = policy.act_tape(tape, &obs)?;
        let q = critic.q_tape(tape, &obs, &actions)?;
        let tail = tape.mul_const(q, gamma_pow);
        objective = tape.add(objective, tail);
    }

    Ok(RolloutOutcome {
        objective,
        steps: k,
        bootstrapped,
        reward_values,
        action_values,
    })
}
