//! Replay storage: whole episodes with per-step transition records, FIFO
//! eviction, uniform transition sampling for critic updates, and uniform
//! segment sampling (never crossing an episode boundary) for rollout-based
//! actor updates.

use super::{ExogenousTrajectory, ScenarioError};
use rand::Rng;
use std::collections::VecDeque;
use std::sync::Arc;

/// One environment transition plus enough hidden state to restart the
/// simulator at this step: the per-charger SoC entering the step. Occupancy
/// itself is reconstructed from the episode's session list.
#[derive(Debug, Clone)]
pub struct StoredStep {
    pub t: usize,
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
    /// SoC per charger at the start of the step (0 where unoccupied).
    pub soc_before: Vec<f64>,
}

#[derive(Debug)]
pub struct EpisodeRecord {
    pub trajectory: Arc<ExogenousTrajectory>,
    pub steps: Vec<StoredStep>,
}

/// Borrowed view of K consecutive steps of one episode; the `Arc` keeps the
/// episode alive across FIFO eviction.
#[derive(Debug, Clone)]
pub struct SegmentView {
    pub episode: Arc<EpisodeRecord>,
    pub start: usize,
    pub k: usize,
}

impl SegmentView {
    pub fn steps(&self) -> &[StoredStep] {
        &self.episode.steps[self.start..self.start + self.k]
    }
}

/// Column-flattened 1-step transition batch (row-major, `len` rows).
#[derive(Debug, Clone)]
pub struct TransitionBatch {
    pub len: usize,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub obs: Vec<f64>,
    pub actions: Vec<f64>,
    pub rewards: Vec<f64>,
    pub next_obs: Vec<f64>,
    /// 1.0 where the episode ended at this transition, else 0.0.
    pub dones: Vec<f64>,
}

#[derive(Debug)]
pub struct TrajectoryStore {
    capacity_episodes: usize,
    episodes: VecDeque<Arc<EpisodeRecord>>,
    total_steps: usize,
}

impl TrajectoryStore {
    pub fn new(capacity_episodes: usize) -> Self {
        assert!(capacity_episodes > 0, "capacity must be positive");
        Self {
            capacity_episodes,
            episodes: VecDeque::new(),
            total_steps: 0,
        }
    }

    pub fn n_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn n_transitions(&self) -> usize {
        self.total_steps
    }

    /// Insert a finished episode, evicting the oldest episodes beyond
    /// capacity.
    pub fn push_episode(&mut self, episode: EpisodeRecord) {
        assert!(!episode.steps.is_empty(), "empty episode");
        self.total_steps += episode.steps.len();
        self.episodes.push_back(Arc::new(episode));
        while self.episodes.len() > self.capacity_episodes {
            let old = self.episodes.pop_front().unwrap();
            self.total_steps -= old.steps.len();
        }
    }

    /// Uniform sample over all stored transitions. Returns `None` until the
    /// store holds at least `batch` transitions.
    pub fn sample_transitions<R: Rng>(&self, rng: &mut R, batch: usize) -> Option<TransitionBatch> {
        if batch == 0 || self.total_steps < batch {
            return None;
        }
        let first = &self.episodes[0].steps[0];
        let (obs_dim, act_dim) = (first.obs.len(), first.action.len());
        let mut out = TransitionBatch {
            len: batch,
            obs_dim,
            act_dim,
            obs: Vec::with_capacity(batch * obs_dim),
            actions: Vec::with_capacity(batch * act_dim),
            rewards: Vec::with_capacity(batch),
            next_obs: Vec::with_capacity(batch * obs_dim),
            dones: Vec::with_capacity(batch),
        };
        for _ in 0..batch {
            let mut idx = rng.gen_range(0..self.total_steps);
            let mut step = None;
            for ep in &self.episodes {
                if idx < ep.steps.len() {
                    step = Some(&ep.steps[idx]);
                    break;
                }
                idx -= ep.steps.len();
            }
            let step = step.expect("index within total_steps");
            out.obs.extend_from_slice(&step.obs);
            out.actions.extend_from_slice(&step.action);
            out.rewards.push(step.reward);
            out.next_obs.extend_from_slice(&step.next_obs);
            out.dones.push(if step.done { 1.0 } else { 0.0 });
        }
        Some(out)
    }

    /// Uniform sample over all (episode, start) pairs with `start + k` inside
    /// the episode. Returns `Ok(None)` until `batch` segments are available;
    /// errors if `k` cannot fit in any stored episode.
    pub fn sample_segments<R: Rng>(
        &self,
        rng: &mut R,
        k: usize,
        batch: usize,
    ) -> Result<Option<Vec<SegmentView>>, ScenarioError> {
        if k == 0 {
            return Err(ScenarioError::InvalidArg("segment length must be >= 1"));
        }
        let longest = self.episodes.iter().map(|e| e.steps.len()).max().unwrap_or(0);
        if !self.episodes.is_empty() && k > longest {
            return Err(ScenarioError::SegmentTooLong { k, longest });
        }
        let eligible: usize = self
            .episodes
            .iter()
            .map(|e| e.steps.len().saturating_sub(k - 1))
            .sum();
        if batch == 0 || eligible < batch {
            return Ok(None);
        }
        let mut out = Vec::with_capacity(batch);
        for _ in 0..batch {
            let mut idx = rng.gen_range(0..eligible);
            let mut found = None;
            for ep in &self.episodes {
                let starts = ep.steps.len().saturating_sub(k - 1);
                if idx < starts {
                    found = Some(SegmentView {
                        episode: Arc::clone(ep),
                        start: idx,
                        k,
                    });
                    break;
                }
                idx -= starts;
            }
            out.push(found.expect("index within eligible count"));
        }
        Ok(Some(out))
    }
}
