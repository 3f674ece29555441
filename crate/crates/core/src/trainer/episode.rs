use rand::seq::index::sample;
use rand::Rng;

use crate::entity::{feature, ObservationSet};
use crate::numerics::Tensor;

use super::{Result, TrainError};

/// One recorded episode. Step `t` stores what the agents saw and did at
/// tick `t`; the last stored step is always terminal.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub n_agents: usize,
    pub n_entities: usize,
    pub n_actions: usize,
    pub state_dim: usize,
    /// `[len, n_agents, n_entities, WIDTH]`, stored in single precision.
    pub obs: Vec<f32>,
    /// `[len, n_agents, n_actions]`
    pub avail: Vec<bool>,
    /// `[len, n_agents]`
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub terminals: Vec<bool>,
    /// `[len, state_dim]`
    pub states: Vec<f64>,
    pub win: bool,
}

impl Episode {
    pub fn new(n_agents: usize, n_entities: usize, n_actions: usize, state_dim: usize) -> Self {
        Self {
            n_agents,
            n_entities,
            n_actions,
            state_dim,
            obs: Vec::new(),
            avail: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            terminals: Vec::new(),
            states: Vec::new(),
            win: false,
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    fn obs_width(&self) -> usize {
        self.n_agents * self.n_entities * feature::WIDTH
    }

    /// Appends one tick.
    pub fn push(
        &mut self,
        obs: &[ObservationSet],
        avail: &[Vec<bool>],
        actions: &[usize],
        reward: f64,
        terminal: bool,
        state: &[f64],
    ) -> Result<()> {
        if obs.len() != self.n_agents
            || avail.len() != self.n_agents
            || actions.len() != self.n_agents
        {
            return Err(TrainError::Integrity("agent count mismatch".into()));
        }
        if state.len() != self.state_dim {
            return Err(TrainError::Integrity("state width mismatch".into()));
        }
        for o in obs {
            if o.n_entities() != self.n_entities {
                return Err(TrainError::Integrity("entity count mismatch".into()));
            }
            self.obs.extend(o.features.iter().map(|&v| v as f32));
        }
        for m in avail {
            if m.len() != self.n_actions {
                return Err(TrainError::Integrity("mask width mismatch".into()));
            }
            self.avail.extend_from_slice(m);
        }
        self.actions.extend_from_slice(actions);
        self.rewards.push(reward);
        self.terminals.push(terminal);
        self.states.extend_from_slice(state);
        Ok(())
    }

    pub fn avail_at(&self, t: usize, agent: usize) -> &[bool] {
        let a = self.n_actions;
        &self.avail[(t * self.n_agents + agent) * a..][..a]
    }

    pub fn action_at(&self, t: usize, agent: usize) -> usize {
        self.actions[t * self.n_agents + agent]
    }

    /// Observation of `agent` at `t` in double precision.
    pub fn observation(&self, t: usize, agent: usize) -> Vec<f64> {
        let per = self.n_entities * feature::WIDTH;
        let start = t * self.obs_width() + agent * per;
        self.obs[start..start + per]
            .iter()
            .map(|&v| v as f64)
            .collect()
    }

    pub fn state_at(&self, t: usize) -> &[f64] {
        &self.states[t * self.state_dim..][..self.state_dim]
    }

    /// Sum of rewards.
    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    /// Every stored action is available under its stored mask, lengths are
    /// consistent and only the final step is terminal.
    pub fn validate(&self) -> Result<()> {
        let len = self.len();
        let lens_ok = self.obs.len() == len * self.obs_width()
            && self.avail.len() == len * self.n_agents * self.n_actions
            && self.actions.len() == len * self.n_agents
            && self.terminals.len() == len
            && self.states.len() == len * self.state_dim;
        if !lens_ok {
            return Err(TrainError::Integrity("inconsistent field lengths".into()));
        }
        for t in 0..len {
            for i in 0..self.n_agents {
                let a = self.action_at(t, i);
                if !self.avail_at(t, i).get(a).copied().unwrap_or(false) {
                    return Err(TrainError::Integrity(format!(
                        "step {t} agent {i}: action {a} was not available"
                    )));
                }
            }
            if self.terminals[t] != (t + 1 == len) {
                return Err(TrainError::Integrity(format!(
                    "terminal flag at step {t} of a {len}-step episode"
                )));
            }
        }
        Ok(())
    }
}

/// Episodes sampled for one update, padded to the longest.
///
/// Episodes are ordered by decreasing length, so the episodes still running
/// at step `t` are always the prefix `0..active_at(t)`.
#[derive(Debug, Clone)]
pub struct EpisodeBatch {
    episodes: Vec<Episode>,
    max_len: usize,
}

impl EpisodeBatch {
    pub fn new(mut episodes: Vec<Episode>) -> Result<Self> {
        let Some(first) = episodes.first() else {
            return Err(TrainError::Integrity("empty batch".into()));
        };
        let dims = (
            first.n_agents,
            first.n_entities,
            first.n_actions,
            first.state_dim,
        );
        for e in &episodes {
            if (e.n_agents, e.n_entities, e.n_actions, e.state_dim) != dims {
                return Err(TrainError::Integrity(
                    "episodes from different scenarios".into(),
                ));
            }
        }
        episodes.sort_by_key(|e| std::cmp::Reverse(e.len()));
        let max_len = episodes[0].len();
        Ok(Self { episodes, max_len })
    }

    pub fn episodes(&self) -> &[Episode] {
        &self.episodes
    }

    pub fn size(&self) -> usize {
        self.episodes.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn n_agents(&self) -> usize {
        self.episodes[0].n_agents
    }

    pub fn n_actions(&self) -> usize {
        self.episodes[0].n_actions
    }

    pub fn n_entities(&self) -> usize {
        self.episodes[0].n_entities
    }

    pub fn state_dim(&self) -> usize {
        self.episodes[0].state_dim
    }

    /// Number of episodes with a real (non-padding) step `t`.
    pub fn active_at(&self, t: usize) -> usize {
        self.episodes.partition_point(|e| e.len() > t)
    }

    /// Padding mask `[size][max_len]`.
    pub fn valid_mask(&self) -> Vec<Vec<bool>> {
        self.episodes
            .iter()
            .map(|e| (0..self.max_len).map(|t| t < e.len()).collect())
            .collect()
    }

    /// Count of non-padding steps.
    pub fn n_valid(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    /// `[active * n_agents, n_entities, WIDTH]`, episode-major.
    pub fn obs_at(&self, t: usize) -> Tensor {
        let active = self.active_at(t);
        let n = self.n_agents();
        let e = self.n_entities();
        let width = n * e * feature::WIDTH;
        let mut data = Vec::with_capacity(active * width);
        for ep in &self.episodes[..active] {
            data.extend(ep.obs[t * width..(t + 1) * width].iter().map(|&v| v as f64));
        }
        Tensor::new(vec![active * n, e, feature::WIDTH], data).expect("batch observation")
    }

    /// Flattened `[active * n_agents, n_actions]` availability.
    pub fn avail_at(&self, t: usize) -> Vec<bool> {
        let active = self.active_at(t);
        let width = self.n_agents() * self.n_actions();
        let mut out = Vec::with_capacity(active * width);
        for ep in &self.episodes[..active] {
            out.extend_from_slice(&ep.avail[t * width..(t + 1) * width]);
        }
        out
    }

    /// `[active * n_agents]` chosen actions.
    pub fn actions_at(&self, t: usize) -> Vec<usize> {
        let active = self.active_at(t);
        let n = self.n_agents();
        let mut out = Vec::with_capacity(active * n);
        for ep in &self.episodes[..active] {
            out.extend_from_slice(&ep.actions[t * n..(t + 1) * n]);
        }
        out
    }

    /// `[active, state_dim]`, or `None` when the state is empty.
    pub fn state_at(&self, t: usize) -> Option<Tensor> {
        let s = self.state_dim();
        if s == 0 {
            return None;
        }
        let active = self.active_at(t);
        let mut data = Vec::with_capacity(active * s);
        for ep in &self.episodes[..active] {
            data.extend_from_slice(ep.state_at(t));
        }
        Some(Tensor::new(vec![active, s], data).expect("batch state"))
    }
}

/// Ring buffer of whole episodes with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: Vec<Episode>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            episodes: Vec::new(),
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn can_sample(&self, batch: usize) -> bool {
        self.episodes.len() >= batch
    }

    /// Stores an episode after auditing it; the oldest is overwritten once full.
    pub fn insert(&mut self, episode: Episode) -> Result<()> {
        episode.validate()?;
        if self.episodes.len() < self.capacity {
            self.episodes.push(episode);
        } else {
            self.episodes[self.next] = episode;
        }
        self.next = (self.next + 1) % self.capacity;
        Ok(())
    }

    /// `batch` distinct episodes chosen uniformly, or `None` if too few are stored.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Option<EpisodeBatch> {
        if !self.can_sample(batch) || batch == 0 {
            return None;
        }
        let picks = sample(rng, self.episodes.len(), batch);
        let eps = picks.iter().map(|i| self.episodes[i].clone()).collect();
        EpisodeBatch::new(eps).ok()
    }
}
