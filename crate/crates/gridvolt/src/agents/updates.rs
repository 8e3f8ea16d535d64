//! Gradient updates: twin-critic regression against smoothed targets, the
//! critic-only actor ascent, and the rollout actor update that differentiates
//! through the simulator. All tape work reuses one arena via `clear`.

use super::{Adam, AgentError, Mlp, ObsScaler};
use crate::diffmath::{DNode, DiffError, Tape};
use crate::env::{rollout_diff, Env, EnvConfig, EnvError, TapeCritic, TapePolicy};
use crate::powerflow::GridModel;
use crate::scenario::{SegmentView, TransitionBatch};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use std::sync::Arc;

/// Clipped Gaussian target-smoothing noise: clip(N(0, sigma), -c, c) per
/// entry. `sigma = 0` draws nothing and returns zeros.
pub fn smoothing_noise<R: Rng>(rng: &mut R, n: usize, sigma: f64, clip: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, sigma).expect("finite std");
    (0..n)
        .map(|_| normal.sample(rng).clamp(-clip, clip))
        .collect()
}

/// Regression targets y = r + gamma * (1 - done) * min(Q'1, Q'2)(s', a~)
/// where a~ = clip(pi'(s') + noise, -1, 1). `noise` is row-major with
/// `len * act_dim` entries.
pub fn td3_targets(
    t_actor: &Mlp,
    t_critic1: &Mlp,
    t_critic2: &Mlp,
    scaler: &ObsScaler,
    batch: &TransitionBatch,
    gamma: f64,
    noise: &[f64],
) -> Vec<f64> {
    assert_eq!(noise.len(), batch.len * batch.act_dim, "noise entries");
    let mut ys = Vec::with_capacity(batch.len);
    for row in 0..batch.len {
        let next = &batch.next_obs[row * batch.obs_dim..(row + 1) * batch.obs_dim];
        let scaled = scaler.apply(next);
        let mut a = t_actor.forward_plain(&scaled);
        for (i, ai) in a.iter_mut().enumerate() {
            *ai = (*ai + noise[row * batch.act_dim + i]).clamp(-1.0, 1.0);
        }
        let mut input = scaled;
        input.extend_from_slice(&a);
        let q1 = t_critic1.forward_plain(&input)[0];
        let q2 = t_critic2.forward_plain(&input)[0];
        let q = q1.min(q2);
        ys.push(batch.rewards[row] + gamma * (1.0 - batch.dones[row]) * q);
    }
    ys
}

#[derive(Debug, Clone)]
pub struct CriticUpdateResult {
    pub loss1: f64,
    pub loss2: f64,
    pub targets: Vec<f64>,
}

fn critic_loss_and_grads(
    critic: &Mlp,
    scaler: &ObsScaler,
    batch: &TransitionBatch,
    targets: &[f64],
    tape: &mut Tape,
) -> Result<(f64, Vec<f64>), AgentError> {
    tape.clear();
    let leaves = critic.params_as_leaves(tape);
    let mut acc = tape.constant(0.0);
    for row in 0..batch.len {
        let obs = &batch.obs[row * batch.obs_dim..(row + 1) * batch.obs_dim];
        let act = &batch.actions[row * batch.act_dim..(row + 1) * batch.act_dim];
        let mut input = scaler.apply(obs);
        input.extend_from_slice(act);
        let xs: Vec<DNode> = input.iter().map(|&v| tape.constant(v)).collect();
        let q = critic.forward_tape(tape, &leaves, &xs)?[0];
        let diff = tape.add_const(q, -targets[row]);
        let sq = tape.mul(diff, diff);
        acc = tape.add(acc, sq);
    }
    let loss = tape.mul_const(acc, 1.0 / batch.len as f64);
    let loss_val = tape.value(loss);
    if !loss_val.is_finite() {
        return Err(AgentError::NonFinite {
            what: format!(
                "critic loss (targets in [{:.3e}, {:.3e}], rewards in [{:.3e}, {:.3e}])",
                targets.iter().cloned().fold(f64::INFINITY, f64::min),
                targets.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                batch.rewards.iter().cloned().fold(f64::INFINITY, f64::min),
                batch
                    .rewards
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max),
            ),
        });
    }
    let grads = tape.backward(loss)?;
    Ok((loss_val, leaves.iter().map(|&n| grads.wrt(n)).collect()))
}

/// One twin-critic regression step against shared targets.
#[allow(clippy::too_many_arguments)]
pub fn td3_critic_update<R: Rng>(
    critic1: &mut Mlp,
    critic2: &mut Mlp,
    opt1: &mut Adam,
    opt2: &mut Adam,
    t_actor: &Mlp,
    t_critic1: &Mlp,
    t_critic2: &Mlp,
    scaler: &ObsScaler,
    batch: &TransitionBatch,
    gamma: f64,
    sigma_smooth: f64,
    noise_clip: f64,
    tape: &mut Tape,
    rng: &mut R,
) -> Result<CriticUpdateResult, AgentError> {
    let noise = smoothing_noise(rng, batch.len * batch.act_dim, sigma_smooth, noise_clip);
    let targets = td3_targets(t_actor, t_critic1, t_critic2, scaler, batch, gamma, &noise);
    let (loss1, g1) = critic_loss_and_grads(critic1, scaler, batch, &targets, tape)?;
    opt1.step(&mut critic1.params, &g1)?;
    let (loss2, g2) = critic_loss_and_grads(critic2, scaler, batch, &targets, tape)?;
    opt2.step(&mut critic2.params, &g2)?;
    Ok(CriticUpdateResult {
        loss1,
        loss2,
        targets,
    })
}

/// Critic-only actor step: descend -mean Q1(s, pi(s)).
pub fn td3_actor_update(
    actor: &mut Mlp,
    opt: &mut Adam,
    critic1: &Mlp,
    scaler: &ObsScaler,
    batch: &TransitionBatch,
    tape: &mut Tape,
) -> Result<f64, AgentError> {
    tape.clear();
    let leaves = actor.params_as_leaves(tape);
    let frozen = critic1.params_as_constants(tape);
    let mut acc = tape.constant(0.0);
    for row in 0..batch.len {
        let obs = &batch.obs[row * batch.obs_dim..(row + 1) * batch.obs_dim];
        let scaled = scaler.apply(obs);
        let xs: Vec<DNode> = scaled.iter().map(|&v| tape.constant(v)).collect();
        let a = actor.forward_tape(tape, &leaves, &xs)?;
        let mut input = xs;
        input.extend_from_slice(&a);
        let q = critic1.forward_tape(tape, &frozen, &input)?[0];
        acc = tape.add(acc, q);
    }
    let loss = tape.mul_const(acc, -1.0 / batch.len as f64);
    let loss_val = tape.value(loss);
    if !loss_val.is_finite() {
        return Err(AgentError::NonFinite {
            what: "actor loss".into(),
        });
    }
    let grads = tape.backward(loss)?;
    let g: Vec<f64> = leaves.iter().map(|&n| grads.wrt(n)).collect();
    opt.step(&mut actor.params, &g)?;
    Ok(loss_val)
}

/// Actor network as a tape policy; parameters are pre-pushed leaves shared
/// by every call on the same tape, so per-step gradients accumulate.
pub struct ActorOnTape<'a> {
    pub mlp: &'a Mlp,
    pub scaler: &'a ObsScaler,
    pub params: Vec<DNode>,
}

impl TapePolicy for ActorOnTape<'_> {
    fn act_tape(&self, tape: &mut Tape, obs: &[DNode]) -> Result<Vec<DNode>, DiffError> {
        let scaled = self.scaler.apply_tape(tape, obs);
        self.mlp.forward_tape(tape, &self.params, &scaled)
    }
}

/// Frozen critic as a tape bootstrap; parameters are constants.
pub struct CriticOnTape<'a> {
    pub mlp: &'a Mlp,
    pub scaler: &'a ObsScaler,
    pub params: Vec<DNode>,
}

impl TapeCritic for CriticOnTape<'_> {
    fn q_tape(&self, tape: &mut Tape, obs: &[DNode], act: &[DNode]) -> Result<DNode, DiffError> {
        let mut input = self.scaler.apply_tape(tape, obs);
        input.extend_from_slice(act);
        Ok(self.mlp.forward_tape(tape, &self.params, &input)?[0])
    }
}

#[derive(Debug, Clone)]
pub struct ActorUpdateResult {
    pub loss: f64,
    pub used: usize,
    pub dropped: usize,
}

/// Gradient of the negated mean rollout objective over a segment batch.
/// Divergent rollouts are dropped and counted; more than half dropped is an
/// epoch-abort error.
#[allow(clippy::too_many_arguments)]
pub fn pi_actor_gradient(
    actor: &Mlp,
    critic1: &Mlp,
    scaler: &ObsScaler,
    segments: &[SegmentView],
    grid: &Arc<GridModel>,
    env_cfg: &EnvConfig,
    gamma: f64,
    fixed_iters: usize,
    tape: &mut Tape,
) -> Result<(Vec<f64>, ActorUpdateResult), AgentError> {
    if segments.is_empty() {
        return Err(AgentError::InvalidConfig("empty segment batch".into()));
    }
    let n_params = actor.spec.param_count();
    let mut grad_acc = vec![0.0; n_params];
    let mut loss_acc = 0.0;
    let mut dropped = 0usize;
    for seg in segments {
        let head = &seg.steps()[0];
        let env = Env::restore(
            Arc::clone(grid),
            Arc::clone(&seg.episode.trajectory),
            env_cfg.clone(),
            head.t,
            &head.soc_before,
        )?;
        tape.clear();
        let policy = ActorOnTape {
            mlp: actor,
            scaler,
            params: actor.params_as_leaves(tape),
        };
        let critic = CriticOnTape {
            mlp: critic1,
            scaler,
            params: critic1.params_as_constants(tape),
        };
        let rollout = match rollout_diff(&env, tape, &policy, &critic, seg.k, gamma, fixed_iters) {
            Ok(r) => r,
            Err(EnvError::RolloutDivergence { .. }) => {
                dropped += 1;
                continue;
            }
            Err(other) => return Err(other.into()),
        };
        let grads = tape.backward(rollout.objective)?;
        for (acc, leaf) in grad_acc.iter_mut().zip(&policy.params) {
            *acc += grads.wrt(*leaf);
        }
        loss_acc += tape.value(rollout.objective);
    }
    let total = segments.len();
    let used = total - dropped;
    if 2 * dropped > total || used == 0 {
        return Err(AgentError::EpochAborted { dropped, total });
    }
    let scale = -1.0 / used as f64;
    for g in &mut grad_acc {
        *g *= scale;
    }
    let loss = loss_acc * scale;
    if !loss.is_finite() {
        return Err(AgentError::NonFinite {
            what: "rollout actor loss".into(),
        });
    }
    Ok((
        grad_acc,
        ActorUpdateResult {
            loss,
            used,
            dropped,
        },
    ))
}

/// Rollout actor step: ascend the mean K-step objective by descending its
/// negation.
#[allow(clippy::too_many_arguments)]
pub fn pi_actor_update(
    actor: &mut Mlp,
    opt: &mut Adam,
    critic1: &Mlp,
    scaler: &ObsScaler,
    segments: &[SegmentView],
    grid: &Arc<GridModel>,
    env_cfg: &EnvConfig,
    gamma: f64,
    fixed_iters: usize,
    tape: &mut Tape,
) -> Result<ActorUpdateResult, AgentError> {
    let (grads, result) = pi_actor_gradient(
        actor, critic1, scaler, segments, grid, env_cfg, gamma, fixed_iters, tape,
    )?;
    opt.step(&mut actor.params, &grads)?;
    Ok(result)
}
