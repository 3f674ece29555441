//! Centralized value-decomposition training: epsilon-greedy rollouts with a
//! hidden-state carry, whole-episode replay, TD targets from a frozen target
//! network and the squared TD loss.

mod episode;
mod learner;
mod rollout;

pub use episode::{Episode, EpisodeBatch, ReplayBuffer};
pub use learner::{td_targets, td_targets_with, Learner, NetworkTarget, TargetEvaluator};
pub use rollout::{evaluate, evaluation_seed, rollout_episode, EpisodeStats, EvalStats};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::battlesim::{EnvError, ScenarioSpec};
use crate::mixer::MixerConfig;
use crate::model::{ModelConfig, ModelError};
use crate::numerics::NumericsError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("replay integrity: {0}")]
    Integrity(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl From<NumericsError> for TrainError {
    fn from(e: NumericsError) -> Self {
        Self::Model(ModelError::Numerics(e))
    }
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub gamma: f64,
    pub buffer_capacity: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_anneal_steps: u64,
    /// In training steps.
    pub target_update_interval: u64,
    /// In environment steps.
    pub test_interval: u64,
    pub test_episodes: usize,
    /// Environment-step budget.
    pub t_max: u64,
    pub lr: f64,
    pub optim_alpha: f64,
    pub optim_eps: f64,
    /// Global gradient-norm bound; non-positive disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            gamma: 0.99,
            buffer_capacity: 5000,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_anneal_steps: 50_000,
            target_update_interval: 200,
            test_interval: 2000,
            test_episodes: 32,
            t_max: 200_000,
            lr: 5e-4,
            optim_alpha: 0.99,
            optim_eps: 1e-5,
            grad_clip: 10.0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.into()));
        if !(0.0 <= self.epsilon_end
            && self.epsilon_end <= self.epsilon_start
            && self.epsilon_start <= 1.0)
        {
            return fail("need 0 <= epsilon_end <= epsilon_start <= 1");
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return fail("gamma must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.buffer_capacity < self.batch_size {
            return fail("need 0 < batch_size <= buffer_capacity");
        }
        if self.test_interval == 0 || self.test_episodes == 0 || self.target_update_interval == 0 {
            return fail("intervals and test_episodes must be positive");
        }
        let positive = |x: f64| x > 0.0 && x.is_finite();
        if !positive(self.lr)
            || !(0.0..1.0).contains(&self.optim_alpha)
            || !positive(self.optim_eps)
        {
            return fail("invalid optimizer settings");
        }
        Ok(())
    }

    /// Linear anneal from `epsilon_start` to `epsilon_end`, constant afterwards.
    pub fn epsilon_at(&self, env_step: u64) -> f64 {
        if self.epsilon_anneal_steps == 0 || env_step >= self.epsilon_anneal_steps {
            return self.epsilon_end;
        }
        let frac = env_step as f64 / self.epsilon_anneal_steps as f64;
        self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)
    }
}

/// One row of the training metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub env_step: u64,
    /// Mean training loss since the previous record; `None` before training starts.
    pub loss: Option<f64>,
    pub epsilon: f64,
    pub win_rate: f64,
    pub mean_return: f64,
    pub ep_len: f64,
}

/// Returned by the metrics hook.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Continue,
    Stop,
}

/// Resumable counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Progress {
    pub env_steps: u64,
    pub episodes: u64,
    pub train_steps: u64,
}

/// Owns the learner, the replay buffer and the rollout RNG.
pub struct Trainer {
    cfg: TrainerConfig,
    scenario: ScenarioSpec,
    learner: Learner,
    buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    progress: Progress,
    last_test: Option<u64>,
    eval_threads: usize,
}

impl Trainer {
    /// Fresh networks initialized from `seed`.
    pub fn new(
        cfg: TrainerConfig,
        scenario: ScenarioSpec,
        model_cfg: ModelConfig,
        mixer_cfg: MixerConfig,
        seed: u64,
    ) -> Result<Self> {
        let learner = Learner::new(model_cfg, mixer_cfg, &scenario, &cfg, seed)?;
        Self::with_learner(cfg, scenario, learner, seed)
    }

    /// Continues from an existing learner, e.g. one restored from a checkpoint.
    pub fn with_learner(
        cfg: TrainerConfig,
        scenario: ScenarioSpec,
        learner: Learner,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        scenario.validate()?;
        Ok(Self {
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_7a1e),
            cfg,
            scenario,
            learner,
            progress: Progress::default(),
            last_test: None,
            eval_threads: 1,
        })
    }

    /// Worker threads used by evaluation.
    pub fn set_eval_threads(&mut self, threads: usize) {
        self.eval_threads = threads.max(1);
    }

    /// Restores counters and the rollout RNG position.
    pub fn resume(&mut self, progress: Progress, rng: RngState) {
        self.progress = progress;
        self.rng = rng.restore();
        self.last_test = Some(progress.env_steps);
        self.learner.train_steps = progress.train_steps;
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn scenario(&self) -> &ScenarioSpec {
        &self.scenario
    }

    pub fn learner(&self) -> &Learner {
        &self.learner
    }

    pub fn learner_mut(&mut self) -> &mut Learner {
        &mut self.learner
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn progress(&self) -> Progress {
        self.progress
    }

    /// Greedy evaluation on the configured evaluation seeds.
    pub fn evaluate(&self) -> Result<EvalStats> {
        evaluate(
            &self.scenario,
            &self.learner.model,
            &self.learner.params,
            self.cfg.test_episodes,
            self.eval_threads,
        )
    }

    /// Collects one episode, stores it and trains once if the buffer allows.
    /// Returns the training loss when an update ran.
    pub fn collect_and_train(&mut self) -> Result<(EpisodeStats, Option<f64>)> {
        let eps = self.cfg.epsilon_at(self.progress.env_steps);
        let seed = self.rng.gen::<u64>();
        let mut env = crate::battlesim::BattleEnv::new(self.scenario.clone().with_seed(seed))?;
        let (episode, stats) = rollout_episode(
            &mut env,
            &self.learner.model,
            &self.learner.params,
            eps,
            &mut self.rng,
        )?;
        self.buffer.insert(episode)?;
        self.progress.env_steps += stats.len as u64;
        self.progress.episodes += 1;
        let mut loss = None;
        if let Some(batch) = self.buffer.sample(self.cfg.batch_size, &mut self.rng) {
            loss = Some(self.learner.train_batch(&batch)?);
            self.progress.train_steps = self.learner.train_steps;
        }
        Ok((stats, loss))
    }

    /// Trains until `t_max` environment steps, evaluating every
    /// `test_interval` steps (and at the start and end). `hook` sees every
    /// record and may stop the run early.
    pub fn run<F>(&mut self, mut hook: F) -> Result<Vec<MetricsRecord>>
    where
        F: FnMut(&Trainer, &MetricsRecord) -> Flow,
    {
        let mut records = Vec::new();
        let mut losses: Vec<f64> = Vec::new();
        if self.last_test.is_none() {
            let rec = self.record(&mut losses)?;
            let flow = hook(self, &rec);
            records.push(rec);
            if flow == Flow::Stop {
                return Ok(records);
            }
        }
        while self.progress.env_steps < self.cfg.t_max {
            let (_, loss) = self.collect_and_train()?;
            losses.extend(loss);
            let since = self.progress.env_steps - self.last_test.unwrap_or(0);
            if since >= self.cfg.test_interval || self.progress.env_steps >= self.cfg.t_max {
                let rec = self.record(&mut losses)?;
                let flow = hook(self, &rec);
                records.push(rec);
                if flow == Flow::Stop {
                    break;
                }
            }
        }
        Ok(records)
    }

    fn record(&mut self, losses: &mut Vec<f64>) -> Result<MetricsRecord> {
        let stats = self.evaluate()?;
        let loss = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
        losses.clear();
        self.last_test = Some(self.progress.env_steps);
        Ok(MetricsRecord {
            env_step: self.progress.env_steps,
            loss,
            epsilon: self.cfg.epsilon_at(self.progress.env_steps),
            win_rate: stats.win_rate,
            mean_return: stats.mean_return,
            ep_len: stats.mean_len,
        })
    }
}

/// Exact position of the rollout RNG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}
