//! The training loop. Each epoch collects one exploration episode into the
//! replay store, then interleaves twin-critic regression with delayed actor
//! updates and soft target tracking. The actor update is either the critic
//! ascent direction or the differentiable simulator rollout, selected by
//! `physics_rollout`; everything else is identical between the two, so the
//! switch isolates exactly that design choice.
//!
//! Checkpoints capture every piece of mutable training state except the
//! replay store (which refills from fresh episodes after a resume), so a
//! reloaded trainer continues its step counters and RNG stream exactly.

use super::updates::{pi_actor_update, td3_actor_update, td3_critic_update};
use super::{
    act, act_greedy, soft_update, Adam, Agent, AgentError, Mlp, MlpSpec, ObsScaler,
    OutputActivation, TrainerConfig,
};
use crate::diffmath::Tape;
use crate::env::{Env, EnvConfig, PfMode, RewardConfig};
use crate::powerflow::GridModel;
use crate::scenario::{EpisodeRecord, ExogenousTrajectory, StoredStep, TrajectoryStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Full mutable training state, JSON-serializable. Floats round-trip
/// losslessly (shortest-representation encoding), so a reloaded trainer
/// produces bit-identical actions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub cfg: TrainerConfig,
    pub reward: RewardConfig,
    pub scaler: ObsScaler,
    pub actor: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub t_actor: Mlp,
    pub t_critic1: Mlp,
    pub t_critic2: Mlp,
    pub opt_actor: Adam,
    pub opt_critic1: Adam,
    pub opt_critic2: Adam,
    pub rng: ChaCha8Rng,
    pub env_steps: u64,
    pub grad_steps: u64,
    pub actor_updates: u64,
    pub episodes: u64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), AgentError> {
        let mut text = serde_json::to_string(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(AgentError::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {})",
                ck.version, CHECKPOINT_VERSION
            )));
        }
        Ok(ck)
    }

    /// Evaluation-ready policy built from the checkpointed actor.
    pub fn agent(&self, label: impl Into<String>) -> Agent {
        Agent::Learned {
            label: label.into(),
            actor: self.actor.clone(),
            scaler: self.scaler.clone(),
        }
    }
}

/// One evaluation row of the learning curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub env_steps: u64,
    pub grad_steps: u64,
    pub train_reward: f64,
    pub eval_mean: f64,
    pub eval_std: f64,
}

/// Per-epoch diagnostics.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub episode_reward: f64,
    pub steps: usize,
    pub episode_diverged: bool,
    pub critic_updates: usize,
    pub actor_updates: usize,
    pub mean_critic_loss: Option<f64>,
    pub mean_actor_loss: Option<f64>,
    pub segments_dropped: usize,
    /// True when a rollout batch lost more than half its segments to
    /// divergence; the remaining updates of this epoch were skipped.
    pub aborted: bool,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    /// State at the best evaluation mean (the last state if nothing was
    /// evaluated).
    pub best: Checkpoint,
    /// State after the final epoch.
    pub last: Checkpoint,
}

pub struct Trainer {
    cfg: TrainerConfig,
    reward: RewardConfig,
    grid: Arc<GridModel>,
    train_scenarios: Vec<Arc<ExogenousTrajectory>>,
    eval_scenarios: Vec<Arc<ExogenousTrajectory>>,
    /// Tolerance-mode dynamics for collection and evaluation.
    env_cfg_exact: EnvConfig,
    /// Fixed-iteration dynamics for differentiable rollouts.
    env_cfg_rollout: EnvConfig,
    actor: Mlp,
    critic1: Mlp,
    critic2: Mlp,
    t_actor: Mlp,
    t_critic1: Mlp,
    t_critic2: Mlp,
    opt_actor: Adam,
    opt_critic1: Adam,
    opt_critic2: Adam,
    scaler: ObsScaler,
    store: TrajectoryStore,
    rng: ChaCha8Rng,
    tape: Tape,
    env_steps: u64,
    grad_steps: u64,
    actor_updates: u64,
    episodes: u64,
}

fn check_scenarios(
    grid: &GridModel,
    train: &[Arc<ExogenousTrajectory>],
    eval: &[Arc<ExogenousTrajectory>],
    reward: &RewardConfig,
    cfg: &TrainerConfig,
) -> Result<(), AgentError> {
    let bad = |msg: String| Err(AgentError::InvalidConfig(msg));
    if train.is_empty() || eval.is_empty() {
        return bad("need at least one training and one evaluation scenario".into());
    }
    let first = &train[0];
    for s in train.iter().chain(eval.iter()) {
        if s.n_bus != first.n_bus
            || s.charger_bus != first.charger_bus
            || s.horizon() != first.horizon()
            || s.dt_hours != first.dt_hours
        {
            return bad(format!(
                "scenario {} does not match the first scenario's shape",
                s.seed
            ));
        }
    }
    if grid.n_bus != first.n_bus {
        return bad(format!(
            "grid has {} buses, scenarios have {}",
            grid.n_bus, first.n_bus
        ));
    }
    if reward.dt_hours != first.dt_hours {
        return bad(format!(
            "reward dt {} does not match scenario dt {}",
            reward.dt_hours, first.dt_hours
        ));
    }
    if cfg.physics_rollout && cfg.k_rollout > first.horizon() {
        return bad(format!(
            "k_rollout {} exceeds the episode horizon {}",
            cfg.k_rollout,
            first.horizon()
        ));
    }
    if cfg.store_capacity < 1 {
        return bad("store_capacity must be >= 1".into());
    }
    Ok(())
}

impl Trainer {
    pub fn new(
        grid: Arc<GridModel>,
        train_scenarios: Vec<Arc<ExogenousTrajectory>>,
        eval_scenarios: Vec<Arc<ExogenousTrajectory>>,
        reward: RewardConfig,
        cfg: TrainerConfig,
    ) -> Result<Self, AgentError> {
        cfg.validate()?;
        reward.validate()?;
        check_scenarios(&grid, &train_scenarios, &eval_scenarios, &reward, &cfg)?;
        let env_cfg_exact = EnvConfig {
            reward: reward.clone(),
            pf: PfMode::default(),
        };
        // Probing an env up front surfaces grid/scenario mismatches here
        // rather than mid-training, and yields the observation width.
        let probe = Env::new(
            Arc::clone(&grid),
            Arc::clone(&train_scenarios[0]),
            env_cfg_exact.clone(),
        )?;
        let obs_dim = probe.obs_dim();
        let act_dim = probe.n_chargers();
        let scaler = ObsScaler::for_layout(probe.n_bus(), act_dim, probe.horizon());

        let mut actor_sizes = vec![obs_dim];
        actor_sizes.extend_from_slice(&cfg.hidden);
        actor_sizes.push(act_dim);
        let mut critic_sizes = vec![obs_dim + act_dim];
        critic_sizes.extend_from_slice(&cfg.hidden);
        critic_sizes.push(1);

        // Draw order is fixed (actor, critic 1, critic 2) so a seed pins
        // every initial weight.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let actor = Mlp::new(MlpSpec::new(actor_sizes, OutputActivation::Tanh), &mut rng);
        let critic1 = Mlp::new(
            MlpSpec::new(critic_sizes.clone(), OutputActivation::Identity),
            &mut rng,
        );
        let critic2 = Mlp::new(
            MlpSpec::new(critic_sizes, OutputActivation::Identity),
            &mut rng,
        );
        let (t_actor, t_critic1, t_critic2) = (actor.clone(), critic1.clone(), critic2.clone());
        let opt_actor = Adam::new(cfg.lr_actor, cfg.weight_decay, actor.spec.param_count());
        let opt_critic1 = Adam::new(cfg.lr_critic, cfg.weight_decay, critic1.spec.param_count());
        let opt_critic2 = Adam::new(cfg.lr_critic, cfg.weight_decay, critic2.spec.param_count());

        Ok(Self {
            env_cfg_rollout: EnvConfig {
                reward: reward.clone(),
                pf: PfMode::Unrolled {
                    fixed_iters: cfg.fixed_iters,
                },
            },
            env_cfg_exact,
            store: TrajectoryStore::new(cfg.store_capacity),
            cfg,
            reward,
            grid,
            train_scenarios,
            eval_scenarios,
            actor,
            critic1,
            critic2,
            t_actor,
            t_critic1,
            t_critic2,
            opt_actor,
            opt_critic1,
            opt_critic2,
            scaler,
            rng: rng.clone(),
            tape: Tape::new(),
            env_steps: 0,
            grad_steps: 0,
            actor_updates: 0,
            episodes: 0,
        })
    }

    /// Rebuild a trainer from checkpointed state. The replay store restarts
    /// empty and refills from new episodes; counters, networks, optimizer
    /// moments and the RNG stream continue exactly where they stopped.
    pub fn from_checkpoint(
        grid: Arc<GridModel>,
        train_scenarios: Vec<Arc<ExogenousTrajectory>>,
        eval_scenarios: Vec<Arc<ExogenousTrajectory>>,
        ck: Checkpoint,
    ) -> Result<Self, AgentError> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(AgentError::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {})",
                ck.version, CHECKPOINT_VERSION
            )));
        }
        ck.cfg.validate()?;
        ck.reward.validate()?;
        check_scenarios(&grid, &train_scenarios, &eval_scenarios, &ck.reward, &ck.cfg)?;
        Ok(Self {
            env_cfg_exact: EnvConfig {
                reward: ck.reward.clone(),
                pf: PfMode::default(),
            },
            env_cfg_rollout: EnvConfig {
                reward: ck.reward.clone(),
                pf: PfMode::Unrolled {
                    fixed_iters: ck.cfg.fixed_iters,
                },
            },
            store: TrajectoryStore::new(ck.cfg.store_capacity),
            cfg: ck.cfg,
            reward: ck.reward,
            grid,
            train_scenarios,
            eval_scenarios,
            actor: ck.actor,
            critic1: ck.critic1,
            critic2: ck.critic2,
            t_actor: ck.t_actor,
            t_critic1: ck.t_critic1,
            t_critic2: ck.t_critic2,
            opt_actor: ck.opt_actor,
            opt_critic1: ck.opt_critic1,
            opt_critic2: ck.opt_critic2,
            scaler: ck.scaler,
            rng: ck.rng,
            tape: Tape::new(),
            env_steps: ck.env_steps,
            grad_steps: ck.grad_steps,
            actor_updates: ck.actor_updates,
            episodes: ck.episodes,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            cfg: self.cfg.clone(),
            reward: self.reward.clone(),
            scaler: self.scaler.clone(),
            actor: self.actor.clone(),
            critic1: self.critic1.clone(),
            critic2: self.critic2.clone(),
            t_actor: self.t_actor.clone(),
            t_critic1: self.t_critic1.clone(),
            t_critic2: self.t_critic2.clone(),
            opt_actor: self.opt_actor.clone(),
            opt_critic1: self.opt_critic1.clone(),
            opt_critic2: self.opt_critic2.clone(),
            rng: self.rng.clone(),
            env_steps: self.env_steps,
            grad_steps: self.grad_steps,
            actor_updates: self.actor_updates,
            episodes: self.episodes,
        }
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn actor(&self) -> &Mlp {
        &self.actor
    }

    pub fn scaler(&self) -> &ObsScaler {
        &self.scaler
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn grad_steps(&self) -> u64 {
        self.grad_steps
    }

    pub fn actor_update_count(&self) -> u64 {
        self.actor_updates
    }

    pub fn episode_count(&self) -> u64 {
        self.episodes
    }

    /// Collect one exploration episode, push it to the store, then run the
    /// update schedule (one critic step per collected step by default, actor
    /// and targets every `actor_delay` critic steps).
    pub fn run_epoch(&mut self) -> Result<EpochStats, AgentError> {
        let idx = (self.episodes as usize) % self.train_scenarios.len();
        let traj = Arc::clone(&self.train_scenarios[idx]);
        let mut env = Env::new(
            Arc::clone(&self.grid),
            Arc::clone(&traj),
            self.env_cfg_exact.clone(),
        )?;
        let act_dim = env.n_chargers();
        let mut steps = Vec::with_capacity(env.horizon());
        let mut obs = env.observation();
        let mut episode_reward = 0.0;
        let mut diverged = false;
        loop {
            let t = env.t();
            let soc_before = env.soc_snapshot();
            let action: Vec<f64> = if self.env_steps < self.cfg.warmup_steps {
                (0..act_dim)
                    .map(|_| self.rng.gen_range(-1.0..=1.0))
                    .collect()
            } else {
                act(
                    &self.actor,
                    &self.scaler,
                    &obs,
                    self.cfg.sigma_explore,
                    &mut self.rng,
                )?
            };
            let out = env.step(&action)?;
            let next_obs = env.observation();
            episode_reward += out.reward;
            diverged |= out.diverged;
            self.env_steps += 1;
            steps.push(StoredStep {
                t,
                obs,
                action,
                reward: out.reward,
                next_obs: next_obs.clone(),
                done: out.done,
                soc_before,
            });
            obs = next_obs;
            if out.done {
                break;
            }
        }
        let collected = steps.len();
        self.episodes += 1;
        self.store.push_episode(EpisodeRecord {
            trajectory: traj,
            steps,
        });

        let mut critic_loss_sum = 0.0;
        let mut critic_updates = 0usize;
        let mut actor_loss_sum = 0.0;
        let mut actor_updates = 0usize;
        let mut dropped = 0usize;
        let mut aborted = false;
        if self.env_steps > self.cfg.warmup_steps {
            'updates: for _ in 0..collected * self.cfg.updates_per_step {
                let Some(batch) = self
                    .store
                    .sample_transitions(&mut self.rng, self.cfg.batch_size)
                else {
                    break;
                };
                let res = td3_critic_update(
                    &mut self.critic1,
                    &mut self.critic2,
                    &mut self.opt_critic1,
                    &mut self.opt_critic2,
                    &self.t_actor,
                    &self.t_critic1,
                    &self.t_critic2,
                    &self.scaler,
                    &batch,
                    self.cfg.gamma,
                    self.cfg.sigma_smooth,
                    self.cfg.noise_clip,
                    &mut self.tape,
                    &mut self.rng,
                )?;
                critic_loss_sum += 0.5 * (res.loss1 + res.loss2);
                critic_updates += 1;
                self.grad_steps += 1;
                if self.grad_steps % self.cfg.actor_delay != 0 {
                    continue;
                }
                let loss = if self.cfg.physics_rollout {
                    let Some(segments) = self.store.sample_segments(
                        &mut self.rng,
                        self.cfg.k_rollout,
                        self.cfg.segment_batch,
                    )?
                    else {
                        continue;
                    };
                    match pi_actor_update(
                        &mut self.actor,
                        &mut self.opt_actor,
                        &self.critic1,
                        &self.scaler,
                        &segments,
                        &self.grid,
                        &self.env_cfg_rollout,
                        self.cfg.gamma,
                        self.cfg.fixed_iters,
                        &mut self.tape,
                    ) {
                        Ok(r) => {
                            dropped += r.dropped;
                            r.loss
                        }
                        Err(AgentError::EpochAborted { dropped: d, .. }) => {
                            dropped += d;
                            aborted = true;
                            break 'updates;
                        }
                        Err(other) => return Err(other),
                    }
                } else {
                    td3_actor_update(
                        &mut self.actor,
                        &mut self.opt_actor,
                        &self.critic1,
                        &self.scaler,
                        &batch,
                        &mut self.tape,
                    )?
                };
                actor_loss_sum += loss;
                actor_updates += 1;
                self.actor_updates += 1;
                soft_update(&self.actor, &mut self.t_actor, self.cfg.tau_soft)?;
                soft_update(&self.critic1, &mut self.t_critic1, self.cfg.tau_soft)?;
                soft_update(&self.critic2, &mut self.t_critic2, self.cfg.tau_soft)?;
            }
        }
        Ok(EpochStats {
            episode_reward,
            steps: collected,
            episode_diverged: diverged,
            critic_updates,
            actor_updates,
            mean_critic_loss: (critic_updates > 0)
                .then(|| critic_loss_sum / critic_updates as f64),
            mean_actor_loss: (actor_updates > 0).then(|| actor_loss_sum / actor_updates as f64),
            segments_dropped: dropped,
            aborted,
        })
    }

    /// Greedy return over every evaluation scenario: (mean, population std).
    /// Consumes no randomness, so repeated calls are bit-identical.
    pub fn evaluate(&self) -> Result<(f64, f64), AgentError> {
        let returns = self.evaluate_returns()?;
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
        Ok((mean, var.sqrt()))
    }

    pub fn evaluate_returns(&self) -> Result<Vec<f64>, AgentError> {
        let mut returns = Vec::with_capacity(self.eval_scenarios.len());
        for traj in &self.eval_scenarios {
            let mut env = Env::new(
                Arc::clone(&self.grid),
                Arc::clone(traj),
                self.env_cfg_exact.clone(),
            )?;
            let mut total = 0.0;
            while !env.is_done() {
                let a = act_greedy(&self.actor, &self.scaler, &env.observation())?;
                total += env.step(&a)?.reward;
            }
            returns.push(total);
        }
        Ok(returns)
    }

    /// Run `epochs` epochs, evaluating every `eval_every` of them. Returns
    /// the learning curve plus the best-evaluated and final states.
    pub fn train(&mut self, epochs: usize) -> Result<TrainReport, AgentError> {
        let mut curve = Vec::new();
        let mut best: Option<(f64, Checkpoint)> = None;
        for epoch in 0..epochs {
            let stats = self.run_epoch()?;
            if (epoch + 1) % self.cfg.eval_every != 0 {
                continue;
            }
            let (eval_mean, eval_std) = self.evaluate()?;
            curve.push(CurvePoint {
                epoch: epoch + 1,
                env_steps: self.env_steps,
                grad_steps: self.grad_steps,
                train_reward: stats.episode_reward,
                eval_mean,
                eval_std,
            });
            if best.as_ref().is_none_or(|(b, _)| eval_mean > *b) {
                best = Some((eval_mean, self.checkpoint()));
            }
        }
        let last = self.checkpoint();
        let best = best.map(|(_, c)| c).unwrap_or_else(|| last.clone());
        Ok(TrainReport { curve, best, last })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fleet::EVSession;
    use crate::powerflow::two_bus_fixture;
    use crate::scenario::ExogenousFrame;

    fn flat_trajectory(seed: u64, p_kw: f64, horizon: usize) -> Arc<ExogenousTrajectory> {
        Arc::new(ExogenousTrajectory {
            grid_id: "two-bus".into(),
            seed,
            dt_hours: 0.25,
            n_bus: 1,
            charger_bus: vec![0],
            frames: (0..horizon)
                .map(|t| ExogenousFrame {
                    t,
                    hour: (t as f64 * 0.25) % 24.0,
                    p_load_kw: vec![p_kw + seed as f64],
                    q_load_kvar: vec![p_kw * 0.3],
                    p_pv_kw: vec![0.0],
                    price_ch: 0.2,
                    price_dis: 0.15,
                })
                .collect(),
            sessions: vec![EVSession {
                charger_id: 0,
                t_arrival: 0,
                t_depart: 6,
                e_arrival: 20.0,
                e_target: 45.0,
                e_min: 10.0,
                e_max: 50.0,
                p_ch_max: 40.0,
                p_dis_max: 30.0,
                soc_min_v2g: 0.2,
            }],
        })
    }

    fn tiny_cfg(seed: u64, physics: bool, k: usize) -> TrainerConfig {
        TrainerConfig {
            hidden: vec![8],
            batch_size: 4,
            segment_batch: 2,
            k_rollout: k,
            warmup_steps: 4,
            store_capacity: 8,
            physics_rollout: physics,
            fixed_iters: 4,
            lr_actor: 1e-3,
            lr_critic: 1e-3,
            seed,
            ..TrainerConfig::default()
        }
    }

    fn tiny_trainer(seed: u64, physics: bool, k: usize) -> Trainer {
        let grid = Arc::new(two_bus_fixture());
        Trainer::new(
            grid,
            vec![flat_trajectory(1, 30.0, 8), flat_trajectory(2, 45.0, 8)],
            vec![flat_trajectory(3, 35.0, 8)],
            RewardConfig::default(),
            tiny_cfg(seed, physics, k),
        )
        .unwrap()
    }

    #[test]
    fn same_seed_reproduces_parameters_and_curve() {
        let mut a = tiny_trainer(7, true, 2);
        let mut b = tiny_trainer(7, true, 2);
        let ra = a.train(3).unwrap();
        let rb = b.train(3).unwrap();
        assert_eq!(a.actor().params, b.actor().params);
        assert_eq!(a.critic1.params, b.critic1.params);
        assert_eq!(ra.curve, rb.curve);

        let mut c = tiny_trainer(8, true, 2);
        c.train(3).unwrap();
        assert_ne!(a.actor().params, c.actor().params);
    }

    #[test]
    fn rollout_switch_off_is_plain_twin_delayed_for_any_k() {
        // With the rollout path disabled the horizon length K is inert, so
        // K = 1 and K = 20 must produce bit-identical training runs.
        let mut a = tiny_trainer(5, false, 1);
        let mut b = tiny_trainer(5, false, 20);
        a.train(3).unwrap();
        b.train(3).unwrap();
        assert_eq!(a.actor().params, b.actor().params);
        assert_eq!(a.critic1.params, b.critic1.params);
        assert_eq!(a.critic2.params, b.critic2.params);
        assert_eq!(a.t_actor.params, b.t_actor.params);
    }

    #[test]
    fn actor_updates_follow_the_delay_schedule() {
        let grid = Arc::new(two_bus_fixture());
        let mut cfg = tiny_cfg(9, false, 1);
        cfg.warmup_steps = 0;
        cfg.actor_delay = 2;
        let mut tr = Trainer::new(
            grid,
            vec![flat_trajectory(1, 30.0, 8)],
            vec![flat_trajectory(3, 35.0, 8)],
            RewardConfig::default(),
            cfg,
        )
        .unwrap();
        let stats = tr.run_epoch().unwrap();
        // 8 collected steps -> 8 critic updates -> 4 delayed actor updates.
        assert_eq!(stats.steps, 8);
        assert_eq!(stats.critic_updates, 8);
        assert_eq!(tr.grad_steps(), 8);
        assert_eq!(tr.actor_update_count(), 4);
        assert_eq!(stats.actor_updates, 4);
        assert!(stats.mean_critic_loss.unwrap().is_finite());
    }

    #[test]
    fn checkpoint_roundtrip_preserves_actions_and_counters() {
        let mut tr = tiny_trainer(11, true, 2);
        tr.train(2).unwrap();
        let ck = tr.checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.actor.params, ck.actor.params);
        assert_eq!(loaded.opt_critic1, ck.opt_critic1);
        assert_eq!(loaded.env_steps, tr.env_steps());
        assert_eq!(loaded.grad_steps, tr.grad_steps());

        let obs = vec![0.1; tr.actor().in_dim()];
        let a_orig = act_greedy(tr.actor(), tr.scaler(), &obs).unwrap();
        let a_load = act_greedy(&loaded.actor, &loaded.scaler, &obs).unwrap();
        assert_eq!(
            a_orig.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            a_load.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );

        // Resume continues the counters exactly and keeps training.
        let grid = Arc::new(two_bus_fixture());
        let mut resumed = Trainer::from_checkpoint(
            grid,
            vec![flat_trajectory(1, 30.0, 8), flat_trajectory(2, 45.0, 8)],
            vec![flat_trajectory(3, 35.0, 8)],
            loaded,
        )
        .unwrap();
        assert_eq!(resumed.env_steps(), tr.env_steps());
        assert_eq!(resumed.episode_count(), tr.episode_count());
        let before = resumed.grad_steps();
        resumed.run_epoch().unwrap();
        assert!(resumed.grad_steps() > before);
    }

    #[test]
    fn checkpoint_version_mismatch_is_rejected() {
        let tr = tiny_trainer(13, false, 1);
        let mut ck = tr.checkpoint();
        ck.version = 99;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        let mut text = serde_json::to_string(&ck).unwrap();
        text.push('\n');
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(AgentError::Checkpoint(_))
        ));
    }

    #[test]
    fn zero_epochs_report_is_the_initial_state() {
        let mut tr = tiny_trainer(15, true, 2);
        let fresh = tr.actor().params.clone();
        let report = tr.train(0).unwrap();
        assert!(report.curve.is_empty());
        assert_eq!(report.best.actor.params, fresh);
        assert_eq!(report.last.actor.params, fresh);
        assert_eq!(report.best.env_steps, 0);
    }

    #[test]
    fn evaluation_is_deterministic_and_single_scenario_std_is_zero() {
        let mut tr = tiny_trainer(17, true, 2);
        tr.train(1).unwrap();
        let (m1, s1) = tr.evaluate().unwrap();
        let (m2, s2) = tr.evaluate().unwrap();
        assert_eq!(m1.to_bits(), m2.to_bits());
        assert_eq!(s1.to_bits(), s2.to_bits());
        assert_eq!(s1, 0.0);
        assert!(m1.is_finite());
    }

    #[test]
    fn mismatched_scenario_shapes_are_rejected() {
        let grid = Arc::new(two_bus_fixture());
        let err = Trainer::new(
            Arc::clone(&grid),
            vec![flat_trajectory(1, 30.0, 8)],
            vec![flat_trajectory(3, 35.0, 10)],
            RewardConfig::default(),
            tiny_cfg(1, true, 2),
        )
        .err()
        .unwrap();
        assert!(matches!(err, AgentError::InvalidConfig(_)));

        let err = Trainer::new(
            grid,
            vec![flat_trajectory(1, 30.0, 8)],
            vec![flat_trajectory(3, 35.0, 8)],
            RewardConfig::default(),
            tiny_cfg(1, true, 9),
        )
        .err()
        .unwrap();
        assert!(matches!(err, AgentError::InvalidConfig(_)));
    }
}
