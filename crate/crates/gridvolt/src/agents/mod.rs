//! Policies, critics, and their training machinery: a from-scratch dense
//! network with twin plain/tape forward passes, an adaptive-moment
//! optimizer, twin-critic updates with target smoothing, the rollout-based
//! actor update that backpropagates through the simulator, and the
//! non-learning baselines.
//!
//! Plain and tape forward passes share operation ordering, so a value
//! computed on the tape equals the plain value bit for bit.

use crate::diffmath::{DNode, DiffError, Tape};
use crate::env::{Env, EnvError};
use crate::fleet::Fleet;
use crate::scenario::ScenarioError;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod trainer;
pub mod updates;

pub use trainer::{Checkpoint, CurvePoint, EpochStats, TrainReport, Trainer};
pub use updates::{
    pi_actor_update, smoothing_noise, td3_actor_update, td3_critic_update, td3_targets,
    ActorUpdateResult, CriticUpdateResult,
};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite {what}")]
    NonFinite { what: String },
    #[error("{dropped} of {total} rollout segments diverged; epoch aborted")]
    EpochAborted { dropped: usize, total: usize },
    #[error("invalid trainer config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint serialization: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    /// Bounded head for actors; outputs land in [-1, 1].
    Tanh,
    /// Unbounded head for critics.
    Identity,
}

/// Dense network shape: `sizes` lists input, hidden, and output widths.
/// Hidden activation is rectified-linear throughout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub sizes: Vec<usize>,
    pub output: OutputActivation,
}

impl MlpSpec {
    pub fn new(sizes: Vec<usize>, output: OutputActivation) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output layers");
        assert!(sizes.iter().all(|&s| s > 0), "zero-width layer");
        Self { sizes, output }
    }

    /// Total parameter count: sum over layers of (fan_in + 1) * fan_out.
    pub fn param_count(&self) -> usize {
        self.sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }
}

/// Dense network over a flat parameter vector. Layout per layer: weights
/// row-major (one row per output neuron), then biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: Vec<f64>,
}

impl Mlp {
    /// Random init: weights uniform in +-1/sqrt(fan_in), biases zero. Draw
    /// order is layer by layer, weights before biases, so a seeded stream
    /// reproduces the same network.
    pub fn new<R: Rng>(spec: MlpSpec, rng: &mut R) -> Self {
        let mut params = Vec::with_capacity(spec.param_count());
        for w in spec.sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let s = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(rng.gen_range(-s..=s));
            }
            for _ in 0..fan_out {
                params.push(0.0);
            }
        }
        Self { spec, params }
    }

    pub fn zeros(spec: MlpSpec) -> Self {
        let n = spec.param_count();
        Self {
            spec,
            params: vec![0.0; n],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.spec.sizes[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.spec.sizes.last().unwrap()
    }

    pub fn forward_plain(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.in_dim(), "input width");
        let mut h = x.to_vec();
        let mut off = 0;
        let n_layers = self.spec.sizes.len() - 1;
        for (l, w) in self.spec.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let w_base = off;
            let b_base = off + fan_in * fan_out;
            let mut out = Vec::with_capacity(fan_out);
            for o in 0..fan_out {
                let row = &self.params[w_base + o * fan_in..w_base + (o + 1) * fan_in];
                let mut acc = self.params[b_base + o];
                for (xi, wi) in h.iter().zip(row) {
                    acc += xi * wi;
                }
                let last = l == n_layers - 1;
                let v = if !last {
                    if acc > 0.0 {
                        acc
                    } else {
                        0.0
                    }
                } else {
                    match self.spec.output {
                        OutputActivation::Tanh => acc.tanh(),
                        OutputActivation::Identity => acc,
                    }
                };
                out.push(v);
            }
            h = out;
            off = b_base + fan_out;
        }
        h
    }

    /// Push every parameter onto the tape as a differentiable leaf, in
    /// storage order.
    pub fn params_as_leaves(&self, tape: &mut Tape) -> Vec<DNode> {
        self.params.iter().map(|&p| tape.leaf(p)).collect()
    }

    /// Push every parameter as a constant (frozen network).
    pub fn params_as_constants(&self, tape: &mut Tape) -> Vec<DNode> {
        self.params.iter().map(|&p| tape.constant(p)).collect()
    }

    /// Tape forward through previously pushed parameter nodes; mirrors
    /// `forward_plain` op for op.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        params: &[DNode],
        x: &[DNode],
    ) -> Result<Vec<DNode>, DiffError> {
        assert_eq!(x.len(), self.in_dim(), "input width");
        assert_eq!(params.len(), self.spec.param_count(), "parameter count");
        let mut h = x.to_vec();
        let mut off = 0;
        let n_layers = self.spec.sizes.len() - 1;
        for (l, w) in self.spec.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let w_base = off;
            let b_base = off + fan_in * fan_out;
            let mut out = Vec::with_capacity(fan_out);
            for o in 0..fan_out {
                let row = &params[w_base + o * fan_in..w_base + (o + 1) * fan_in];
                let b = params[b_base + o];
                let acc = tape.dot_affine(&h, row, b);
                let last = l == n_layers - 1;
                let v = if !last {
                    tape.relu(acc)
                } else {
                    match self.spec.output {
                        OutputActivation::Tanh => tape.tanh(acc),
                        OutputActivation::Identity => acc,
                    }
                };
                out.push(v);
            }
            h = out;
            off = b_base + fan_out;
        }
        Ok(h)
    }
}

/// Fixed per-dimension affine observation scaling, `(x - offset) * scale`.
/// Derived from environment shape only, never from data, so it is
/// deterministic and needs no fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsScaler {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ObsScaler {
    pub fn identity(dim: usize) -> Self {
        Self {
            offset: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Layout-aware scaling: cyclical time, price, per-unit powers, and SoC
    /// already sit in O(1) ranges; steps-to-departure is divided by the
    /// horizon and the bus index by the largest index.
    pub fn for_layout(n_bus: usize, n_chargers: usize, horizon: usize) -> Self {
        let dim = 3 + 2 * n_bus + 3 * n_chargers;
        let mut s = Self::identity(dim);
        let t_left_base = 3 + 2 * n_bus + n_chargers;
        for i in 0..n_chargers {
            s.scale[t_left_base + i] = 1.0 / horizon.max(1) as f64;
        }
        let bus_base = t_left_base + n_chargers;
        for i in 0..n_chargers {
            s.scale[bus_base + i] = 1.0 / n_bus.saturating_sub(1).max(1) as f64;
        }
        s
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim(), "scaler width");
        x.iter()
            .zip(self.offset.iter().zip(&self.scale))
            .map(|(&v, (&off, &sc))| (v - off) * sc)
            .collect()
    }

    /// Tape twin of `apply`; dimensions with (offset, scale) = (0, 1) pass
    /// through without new nodes, which is bit-neutral.
    pub fn apply_tape(&self, tape: &mut Tape, x: &[DNode]) -> Vec<DNode> {
        assert_eq!(x.len(), self.dim(), "scaler width");
        x.iter()
            .zip(self.offset.iter().zip(&self.scale))
            .map(|(&n, (&off, &sc))| {
                if off == 0.0 && sc == 1.0 {
                    n
                } else {
                    let shifted = tape.add_const(n, -off);
                    tape.mul_const(shifted, sc)
                }
            })
            .collect()
    }
}

/// Adaptive-moment optimizer state over a flat parameter vector, with an
/// optional decoupled weight-decay term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64, n: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), AgentError> {
        if params.len() != self.m.len() {
            return Err(AgentError::ShapeMismatch {
                what: "optimizer parameters",
                expected: self.m.len(),
                got: params.len(),
            });
        }
        if grads.len() != params.len() {
            return Err(AgentError::ShapeMismatch {
                what: "optimizer gradients",
                expected: params.len(),
                got: grads.len(),
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(AgentError::NonFinite {
                what: "gradient".into(),
            });
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            if self.weight_decay != 0.0 {
                params[i] -= self.lr * self.weight_decay * params[i];
            }
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Target blend, per parameter: target <- tau * main + (1 - tau) * target.
pub fn soft_update(main: &Mlp, target: &mut Mlp, tau: f64) -> Result<(), AgentError> {
    if main.spec != target.spec {
        return Err(AgentError::ShapeMismatch {
            what: "soft update networks",
            expected: main.spec.param_count(),
            got: target.spec.param_count(),
        });
    }
    for (t, &m) in target.params.iter_mut().zip(&main.params) {
        *t = tau * m + (1.0 - tau) * *t;
    }
    Ok(())
}

/// Policy action with exploration noise: tanh output plus per-dimension
/// Gaussian noise, clipped to [-1, 1]. `noise_std = 0` draws nothing, so
/// evaluation consumes no randomness.
pub fn act<R: Rng>(
    actor: &Mlp,
    scaler: &ObsScaler,
    obs: &[f64],
    noise_std: f64,
    rng: &mut R,
) -> Result<Vec<f64>, AgentError> {
    if obs.len() != actor.in_dim() || obs.len() != scaler.dim() {
        return Err(AgentError::ShapeMismatch {
            what: "actor observation",
            expected: actor.in_dim(),
            got: obs.len(),
        });
    }
    let mut a = actor.forward_plain(&scaler.apply(obs));
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).expect("finite std");
        for ai in &mut a {
            *ai = (*ai + normal.sample(rng)).clamp(-1.0, 1.0);
        }
    }
    Ok(a)
}

/// Deterministic evaluation action (no noise, no randomness consumed).
pub fn act_greedy(actor: &Mlp, scaler: &ObsScaler, obs: &[f64]) -> Result<Vec<f64>, AgentError> {
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    act(actor, scaler, obs, 0.0, &mut rng)
}

/// Charge-as-fast-as-possible: full power wherever an EV is plugged in and
/// not yet full.
pub fn act_cafap(fleet: &Fleet) -> Vec<f64> {
    fleet
        .chargers
        .iter()
        .map(|c| {
            if c.occupied() && c.soc < 1.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

/// The do-nothing baseline.
pub fn act_none(n_chargers: usize) -> Vec<f64> {
    vec![0.0; n_chargers]
}

/// A ready-to-evaluate decision maker, uniform across learned policies and
/// baselines.
#[derive(Debug, Clone)]
pub enum Agent {
    Learned {
        label: String,
        actor: Mlp,
        scaler: ObsScaler,
    },
    Cafap,
    NoCharging,
}

impl Agent {
    pub fn label(&self) -> &str {
        match self {
            Agent::Learned { label, .. } => label,
            Agent::Cafap => "cafap",
            Agent::NoCharging => "no-charging",
        }
    }

    /// Greedy action in the environment's current state.
    pub fn action(&self, env: &Env) -> Result<Vec<f64>, AgentError> {
        match self {
            Agent::Learned { actor, scaler, .. } => act_greedy(actor, scaler, &env.observation()),
            Agent::Cafap => Ok(act_cafap(env.fleet())),
            Agent::NoCharging => Ok(act_none(env.n_chargers())),
        }
    }
}

/// Training hyperparameters. `physics_rollout` switches the actor update
/// between the rollout objective (on) and the critic-only direction (off);
/// everything else is shared, so the off switch is the twin-delayed
/// baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub gamma: f64,
    pub sigma_explore: f64,
    pub sigma_smooth: f64,
    pub noise_clip: f64,
    pub tau_soft: f64,
    pub batch_size: usize,
    /// Segments per rollout-based actor update.
    pub segment_batch: usize,
    pub k_rollout: usize,
    pub actor_delay: u64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub weight_decay: f64,
    pub hidden: Vec<usize>,
    pub physics_rollout: bool,
    /// Fixed sweeps of the training-path power-flow solver.
    pub fixed_iters: usize,
    /// Environment steps taken with uniform random actions before the
    /// policy (and any updates) kick in.
    pub warmup_steps: u64,
    /// Replay capacity in episodes.
    pub store_capacity: usize,
    pub updates_per_step: usize,
    /// Evaluate (and log a curve point) every this many epochs.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            sigma_explore: 0.1,
            sigma_smooth: 0.2,
            noise_clip: 0.5,
            tau_soft: 0.005,
            batch_size: 64,
            segment_batch: 8,
            k_rollout: 20,
            actor_delay: 2,
            lr_actor: 3e-4,
            lr_critic: 3e-4,
            weight_decay: 0.0,
            hidden: vec![256, 256],
            physics_rollout: true,
            fixed_iters: 10,
            warmup_steps: 200,
            store_capacity: 64,
            updates_per_step: 1,
            eval_every: 1,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |msg: String| Err(AgentError::InvalidConfig(msg));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if self.k_rollout < 1 {
            return bad("k_rollout must be >= 1".into());
        }
        if !(self.noise_clip > 0.0) {
            return bad(format!("noise_clip {} must be positive", self.noise_clip));
        }
        if !(self.tau_soft > 0.0 && self.tau_soft <= 1.0) {
            return bad(format!("tau_soft {} outside (0, 1]", self.tau_soft));
        }
        if self.batch_size < 1 || self.segment_batch < 1 {
            return bad("batch sizes must be >= 1".into());
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&h| h == 0) {
            return bad("hidden layers must be nonempty with positive widths".into());
        }
        if self.actor_delay < 1 {
            return bad("actor_delay must be >= 1".into());
        }
        if self.fixed_iters < 1 {
            return bad("fixed_iters must be >= 1".into());
        }
        if self.updates_per_step < 1 {
            return bad("updates_per_step must be >= 1".into());
        }
        if self.eval_every < 1 {
            return bad("eval_every must be >= 1".into());
        }
        if !(self.sigma_explore >= 0.0 && self.sigma_smooth >= 0.0) {
            return bad("noise stds must be nonnegative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn parameter_count_matches_fan_in_plus_one_times_fan_out() {
        let spec = MlpSpec::new(vec![7, 5, 3], OutputActivation::Tanh);
        assert_eq!(spec.param_count(), (7 + 1) * 5 + (5 + 1) * 3);
        let net = Mlp::new(spec.clone(), &mut rng(0));
        assert_eq!(net.params.len(), spec.param_count());
    }

    #[test]
    fn zero_weights_give_zero_action() {
        let net = Mlp::zeros(MlpSpec::new(vec![4, 8, 2], OutputActivation::Tanh));
        let out = net.forward_plain(&[1.0, -2.0, 3.0, 0.5]);
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    fn actor_output_is_bounded() {
        let net = Mlp::new(
            MlpSpec::new(vec![3, 16, 16, 4], OutputActivation::Tanh),
            &mut rng(1),
        );
        let mut r = rng(2);
        for _ in 0..200 {
            let x: Vec<f64> = (0..3).map(|_| r.gen_range(-100.0..100.0)).collect();
            for v in net.forward_plain(&x) {
                assert!((-1.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn plain_and_tape_forward_agree_bit_for_bit() {
        let net = Mlp::new(
            MlpSpec::new(vec![5, 12, 7, 3], OutputActivation::Identity),
            &mut rng(3),
        );
        let mut r = rng(4);
        let mut tape = Tape::new();
        for _ in 0..50 {
            tape.clear();
            let x: Vec<f64> = (0..5).map(|_| r.gen_range(-2.0..2.0)).collect();
            let plain = net.forward_plain(&x);
            let params = net.params_as_constants(&mut tape);
            let xs: Vec<DNode> = x.iter().map(|&v| tape.constant(v)).collect();
            let out = net.forward_tape(&mut tape, &params, &xs).unwrap();
            for (p, o) in plain.iter().zip(out) {
                assert_eq!(p.to_bits(), tape.value(o).to_bits());
            }
        }
    }

    #[test]
    fn tape_forward_gradient_matches_finite_differences() {
        let net = Mlp::new(
            MlpSpec::new(vec![3, 6, 1], OutputActivation::Tanh),
            &mut rng(5),
        );
        let x = [0.4, -0.7, 1.1];
        let f = |params: &[f64]| {
            let probe = Mlp {
                spec: net.spec.clone(),
                params: params.to_vec(),
            };
            probe.forward_plain(&x)[0]
        };
        let mut tape = Tape::new();
        let leaves = net.params_as_leaves(&mut tape);
        let xs: Vec<DNode> = x.iter().map(|&v| tape.constant(v)).collect();
        let out = net.forward_tape(&mut tape, &leaves, &xs).unwrap()[0];
        let grads = tape.backward(out).unwrap();
        let h = 1e-6;
        let mut checked = 0;
        for (i, leaf) in leaves.iter().enumerate() {
            let mut plus = net.params.clone();
            plus[i] += h;
            let mut minus = net.params.clone();
            minus[i] -= h;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
            let analytic = grads.wrt(*leaf);
            let denom = numeric.abs().max(1e-6);
            assert!(
                ((analytic - numeric) / denom).abs() < 1e-4,
                "param {i}: analytic {analytic} vs numeric {numeric}"
            );
            checked += 1;
        }
        assert_eq!(checked, net.spec.param_count());
    }

    #[test]
    fn scaler_plain_and_tape_agree() {
        let scaler = ObsScaler::for_layout(2, 3, 96);
        assert_eq!(scaler.dim(), 3 + 4 + 9);
        let mut r = rng(6);
        let x: Vec<f64> = (0..scaler.dim()).map(|_| r.gen_range(-5.0..5.0)).collect();
        let plain = scaler.apply(&x);
        let mut tape = Tape::new();
        let xs: Vec<DNode> = x.iter().map(|&v| tape.constant(v)).collect();
        let nodes = scaler.apply_tape(&mut tape, &xs);
        for (p, n) in plain.iter().zip(nodes) {
            assert_eq!(p.to_bits(), tape.value(n).to_bits());
        }
        // The t_left block is squashed by the horizon.
        let t_left_slot = 3 + 4 + 3;
        assert_eq!(plain[t_left_slot].to_bits(), (x[t_left_slot] / 96.0).to_bits());
    }

    #[test]
    fn adam_single_step_matches_hand_calculation() {
        let mut opt = Adam::new(0.1, 0.0, 2);
        let mut params = vec![1.0, -2.0];
        let grads = vec![0.5, -0.25];
        opt.step(&mut params, &grads).unwrap();
        // After one step: m_hat = g, v_hat = g^2, so the update is
        // lr * g / (|g| + eps).
        for (i, (&p, &g)) in params.iter().zip(&grads).enumerate() {
            let expect = [1.0, -2.0][i] - 0.1 * g / (g.abs() + 1e-8);
            assert!((p - expect).abs() < 1e-12, "param {i}");
        }
    }

    #[test]
    fn adam_rejects_shape_mismatch_and_nonfinite() {
        let mut opt = Adam::new(0.1, 0.0, 2);
        let mut params = vec![0.0; 3];
        assert!(opt.step(&mut params, &[0.0; 3]).is_err());
        let mut params = vec![0.0; 2];
        assert!(opt.step(&mut params, &[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn soft_update_worked_values() {
        let spec = MlpSpec::new(vec![1, 1], OutputActivation::Identity);
        let mut main = Mlp::zeros(spec.clone());
        main.params = vec![0.0, 0.0];
        let mut target = Mlp::zeros(spec.clone());
        target.params = vec![2.0, 2.0];
        soft_update(&main, &mut target, 0.5).unwrap();
        assert_eq!(target.params, vec![1.0, 1.0]);

        let mut t1 = Mlp::zeros(spec.clone());
        t1.params = vec![5.0, -3.0];
        soft_update(&main, &mut t1, 1.0).unwrap();
        assert_eq!(t1.params, main.params); // tau = 1 copies

        let mut t0 = Mlp::zeros(spec);
        t0.params = vec![5.0, -3.0];
        let before = t0.params.clone();
        soft_update(&main, &mut t0, 0.0).unwrap();
        assert_eq!(t0.params, before); // tau = 0 leaves targets alone
    }

    #[test]
    fn soft_update_contracts_target_distance() {
        let spec = MlpSpec::new(vec![4, 6, 2], OutputActivation::Tanh);
        let main = Mlp::new(spec.clone(), &mut rng(7));
        let mut target = Mlp::new(spec, &mut rng(8));
        let dist = |a: &Mlp, b: &Mlp| {
            a.params
                .iter()
                .zip(&b.params)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max)
        };
        let before = dist(&main, &target);
        soft_update(&main, &mut target, 0.3).unwrap();
        let after = dist(&main, &target);
        assert!(after <= before);
    }

    #[test]
    fn soft_update_shape_mismatch_errors() {
        let a = Mlp::zeros(MlpSpec::new(vec![2, 2], OutputActivation::Tanh));
        let mut b = Mlp::zeros(MlpSpec::new(vec![3, 2], OutputActivation::Tanh));
        assert!(soft_update(&a, &mut b, 0.5).is_err());
    }

    #[test]
    fn act_noise_statistics() {
        // Zero actor makes the action equal the clipped noise; sigma = 0.1
        // sits 10 sigma from the clip, so the sample std estimates sigma.
        let net = Mlp::zeros(MlpSpec::new(vec![2, 4, 3], OutputActivation::Tanh));
        let scaler = ObsScaler::identity(2);
        let mut r = rng(9);
        let n = 10_000;
        let mut sums = vec![0.0; 3];
        let mut sqsums = vec![0.0; 3];
        for _ in 0..n {
            let a = act(&net, &scaler, &[0.3, -0.9], 0.1, &mut r).unwrap();
            for (d, &v) in a.iter().enumerate() {
                sums[d] += v;
                sqsums[d] += v * v;
            }
        }
        for d in 0..3 {
            let mean = sums[d] / n as f64;
            let std = (sqsums[d] / n as f64 - mean * mean).sqrt();
            assert!(
                (std - 0.1).abs() < 0.01,
                "dimension {d}: std {std} not within 10% of 0.1"
            );
        }
    }

    #[test]
    fn act_is_deterministic_without_noise() {
        let net = Mlp::new(
            MlpSpec::new(vec![4, 8, 2], OutputActivation::Tanh),
            &mut rng(10),
        );
        let scaler = ObsScaler::identity(4);
        let obs = [0.1, 0.2, -0.3, 0.4];
        let a = act_greedy(&net, &scaler, &obs).unwrap();
        let b = act_greedy(&net, &scaler, &obs).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn act_rejects_size_mismatch() {
        let net = Mlp::zeros(MlpSpec::new(vec![4, 2], OutputActivation::Tanh));
        let scaler = ObsScaler::identity(4);
        assert!(act_greedy(&net, &scaler, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cafap_and_none_baselines() {
        use crate::fleet::EVSession;
        let mut fleet = Fleet::new(&[0, 1, 0]);
        let sessions = vec![
            EVSession {
                charger_id: 0,
                t_arrival: 0,
                t_depart: 10,
                e_arrival: 20.0,
                e_target: 45.0,
                e_min: 0.0,
                e_max: 50.0,
                p_ch_max: 22.0,
                p_dis_max: 11.0,
                soc_min_v2g: 0.1,
            },
            EVSession {
                charger_id: 2,
                t_arrival: 0,
                t_depart: 10,
                e_arrival: 50.0,
                e_target: 50.0,
                e_min: 0.0,
                e_max: 50.0,
                p_ch_max: 22.0,
                p_dis_max: 11.0,
                soc_min_v2g: 0.1,
            },
        ];
        fleet.process_arrivals_departures(0, &sessions).unwrap();
        // Charger 0 occupied at SoC 0.4 -> 1; charger 1 empty -> 0; charger 2
        // occupied but already full -> 0.
        assert_eq!(act_cafap(&fleet), vec![1.0, 0.0, 0.0]);
        assert_eq!(act_none(3), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn trainer_config_validation() {
        let ok = TrainerConfig::default();
        assert!(ok.validate().is_ok());
        let mut bad = TrainerConfig::default();
        bad.gamma = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = TrainerConfig::default();
        bad.k_rollout = 0;
        assert!(bad.validate().is_err());
        let mut bad = TrainerConfig::default();
        bad.tau_soft = 1.5;
        assert!(bad.validate().is_err());
        let mut bad = TrainerConfig::default();
        bad.noise_clip = 0.0;
        assert!(bad.validate().is_err());
    }
}
