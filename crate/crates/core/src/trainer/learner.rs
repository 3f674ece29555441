use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::battlesim::ScenarioSpec;
use crate::mixer::{Mixer, MixerConfig};
use crate::model::{AgentModel, ModelConfig};
use crate::numerics::{clip_grad_norm, BoundParams, ParamStore, RmsProp, Tape, Tensor, Var};

use super::{EpisodeBatch, Result, TrainError, TrainerConfig};

/// Supplies target-network quantities to [`td_targets_with`].
pub trait TargetEvaluator {
    /// Per-agent Q-values `[active * n_agents, n_actions]` at step `t` for the
    /// episodes still running. Called for `t = 0, 1, ...` in order.
    fn agent_q(&mut self, batch: &EpisodeBatch, t: usize) -> Result<Vec<f64>>;

    /// Mixes per-agent values `[active, n_agents]` at step `t` into `[active]`.
    fn mix(&mut self, batch: &EpisodeBatch, t: usize, values: &[f64]) -> Result<Vec<f64>>;
}

/// `y[b][t] = r_t` on terminal steps, otherwise
/// `r_t + gamma * F(max_a Q_1(t+1), ..., max_a Q_n(t+1))` where each max runs
/// over the actions available at `t + 1`. Rows are in batch order.
pub fn td_targets_with<E: TargetEvaluator>(
    batch: &EpisodeBatch,
    gamma: f64,
    eval: &mut E,
) -> Result<Vec<Vec<f64>>> {
    let n_actions = batch.n_actions();
    let mut mixed: Vec<Vec<f64>> = Vec::with_capacity(batch.max_len());
    for t in 0..batch.max_len() {
        let q = eval.agent_q(batch, t)?;
        if t == 0 {
            mixed.push(Vec::new());
            continue;
        }
        let avail = batch.avail_at(t);
        if q.len() != avail.len() {
            return Err(TrainError::Integrity("target Q width mismatch".into()));
        }
        let maxes: Vec<f64> = q
            .chunks_exact(n_actions)
            .zip(avail.chunks_exact(n_actions))
            .map(|(row, mask)| {
                row.iter()
                    .zip(mask)
                    .filter(|(_, &m)| m)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        mixed.push(eval.mix(batch, t, &maxes)?);
    }
    Ok(batch
        .episodes()
        .iter()
        .enumerate()
        .map(|(b, ep)| {
            (0..ep.len())
                .map(|t| {
                    let r = ep.rewards[t];
                    if ep.terminals[t] {
                        r
                    } else {
                        r + gamma * mixed[t + 1][b]
                    }
                })
                .collect()
        })
        .collect())
}

/// Target evaluator backed by an agent network and mixer.
pub struct NetworkTarget<'a> {
    model: &'a AgentModel,
    mixer: &'a Mixer,
    store: &'a ParamStore,
    hidden: Option<Tensor>,
}

impl<'a> NetworkTarget<'a> {
    pub fn new(model: &'a AgentModel, mixer: &'a Mixer, store: &'a ParamStore) -> Self {
        Self {
            model,
            mixer,
            store,
            hidden: None,
        }
    }
}

impl TargetEvaluator for NetworkTarget<'_> {
    fn agent_q(&mut self, batch: &EpisodeBatch, t: usize) -> Result<Vec<f64>> {
        let rows = batch.active_at(t) * batch.n_agents();
        let hidden = if t == 0 {
            self.model.initial_hidden(rows).tokens
        } else {
            self.hidden.take().map(|h| keep_rows(h, rows))
        };
        let tape = Tape::new();
        let p = tape.bind(self.store);
        let out = self.model.step(
            &p,
            tape.constant(batch.obs_at(t)),
            hidden.map(|h| tape.constant(h)),
        )?;
        self.hidden = out.hidden.map(|h| h.value());
        Ok(out.q.value().into_data())
    }

    fn mix(&mut self, batch: &EpisodeBatch, t: usize, values: &[f64]) -> Result<Vec<f64>> {
        let active = batch.active_at(t);
        let tape = Tape::new();
        let p = tape.bind(self.store);
        let q = tape.constant(Tensor::new(
            vec![active, batch.n_agents()],
            values.to_vec(),
        )?);
        let state = batch.state_at(t).map(|s| tape.constant(s));
        Ok(self.mixer.mix(&p, q, state)?.value().into_data())
    }
}

fn keep_rows(t: Tensor, rows: usize) -> Tensor {
    if t.shape()[0] == rows {
        return t;
    }
    let mut shape = t.shape().to_vec();
    let per = t.len() / shape[0];
    shape[0] = rows;
    let mut data = t.into_data();
    data.truncate(rows * per);
    Tensor::new(shape, data).expect("row prefix")
}

/// TD targets through a network target.
pub fn td_targets(
    batch: &EpisodeBatch,
    model: &AgentModel,
    mixer: &Mixer,
    target: &ParamStore,
    gamma: f64,
) -> Result<Vec<Vec<f64>>> {
    td_targets_with(batch, gamma, &mut NetworkTarget::new(model, mixer, target))
}

/// Online and target networks with their optimizer.
#[derive(Debug, Clone)]
pub struct Learner {
    pub model: AgentModel,
    pub mixer: Mixer,
    /// Agent and mixer parameters in one table.
    pub params: ParamStore,
    pub target: ParamStore,
    pub optim: RmsProp,
    pub train_steps: u64,
    pub gamma: f64,
    pub grad_clip: f64,
    pub target_update_interval: u64,
}

impl Learner {
    pub fn new(
        model_cfg: ModelConfig,
        mixer_cfg: MixerConfig,
        scenario: &ScenarioSpec,
        cfg: &TrainerConfig,
        seed: u64,
    ) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = AgentModel::new(model_cfg, scenario.action_groups(), &mut params, &mut rng)?;
        let mixer = Mixer::new(
            mixer_cfg,
            scenario.n_ally,
            scenario.state_width(),
            &mut params,
            &mut rng,
        )?;
        Ok(Self::from_parts(model, mixer, params, cfg))
    }

    /// Assembles a learner; the target starts as a copy of `params`.
    pub fn from_parts(
        model: AgentModel,
        mixer: Mixer,
        params: ParamStore,
        cfg: &TrainerConfig,
    ) -> Self {
        Self {
            target: params.clone(),
            model,
            mixer,
            params,
            optim: RmsProp::new(cfg.lr, cfg.optim_alpha, cfg.optim_eps),
            train_steps: 0,
            gamma: cfg.gamma,
            grad_clip: cfg.grad_clip,
            target_update_interval: cfg.target_update_interval,
        }
    }

    /// Hard copy of the online parameters into the target.
    pub fn update_target(&mut self) {
        self.target
            .copy_values_from(&self.params)
            .expect("target shares the online layout");
    }

    /// Targets for `batch` from the frozen target parameters.
    pub fn targets(&self, batch: &EpisodeBatch) -> Result<Vec<Vec<f64>>> {
        td_targets(batch, &self.model, &self.mixer, &self.target, self.gamma)
    }

    /// Mean squared TD error over valid steps, recorded on the tape of `p`.
    /// `None` when the batch holds no valid step.
    pub fn loss<'t>(
        &self,
        p: &BoundParams<'t>,
        batch: &EpisodeBatch,
        targets: &[Vec<f64>],
    ) -> Result<Option<Var<'t>>> {
        let n_valid = batch.n_valid();
        if n_valid == 0 {
            return Ok(None);
        }
        let tape = p.tape();
        let n = batch.n_agents();
        let mut hidden = self
            .model
            .initial_hidden(batch.active_at(0) * n)
            .tokens
            .map(|h| tape.constant(h));
        let mut terms = Vec::with_capacity(batch.max_len());
        for t in 0..batch.max_len() {
            let active = batch.active_at(t);
            let rows = active * n;
            if let Some(h) = hidden {
                if h.shape()[0] != rows {
                    hidden = Some(h.slice(0, 0, rows)?);
                }
            }
            let out = self.model.step(p, tape.constant(batch.obs_at(t)), hidden)?;
            hidden = out.hidden;
            let chosen = out.q.gather(&batch.actions_at(t))?.reshape(&[active, n])?;
            let state = batch.state_at(t).map(|s| tape.constant(s));
            let q_tot = self.mixer.mix(p, chosen, state)?;
            let y: Vec<f64> = targets[..active].iter().map(|ys| ys[t]).collect();
            let y = tape.constant(Tensor::new(vec![active], y)?);
            terms.push(q_tot.squared_error(y)?.sum()?);
        }
        let total = Var::concat(&terms, 0)?.sum()?;
        Ok(Some(total.scale(1.0 / n_valid as f64)?))
    }

    /// Loss of `batch` under `params` against the current targets, without updating.
    pub fn batch_loss(&self, params: &ParamStore, batch: &EpisodeBatch) -> Result<f64> {
        let targets = self.targets(batch)?;
        let tape = Tape::new();
        let p = tape.bind(params);
        Ok(self
            .loss(&p, batch, &targets)?
            .map(|l| l.item())
            .unwrap_or(0.0))
    }

    /// Writes loss gradients into `self.params` and returns the loss.
    pub fn compute_gradients(&mut self, batch: &EpisodeBatch) -> Result<f64> {
        let targets = self.targets(batch)?;
        let tape = Tape::new();
        let p = tape.bind(&self.params);
        self.params.zero_grads();
        match self.loss(&p, batch, &targets)? {
            Some(loss) => {
                let value = loss.item();
                tape.backward_into(loss, &mut self.params)?;
                Ok(value)
            }
            None => {
                for param in self.params.iter_mut() {
                    param.grad = Some(vec![0.0; param.value.len()]);
                }
                Ok(0.0)
            }
        }
    }

    /// One optimization step on `batch`; refreshes the target every
    /// `target_update_interval` steps. Returns the pre-update loss.
    pub fn train_batch(&mut self, batch: &EpisodeBatch) -> Result<f64> {
        let loss = self.compute_gradients(batch)?;
        if self.grad_clip > 0.0 {
            clip_grad_norm(&mut self.params, self.grad_clip);
        }
        self.optim.step(&mut self.params)?;
        self.train_steps += 1;
        if self.train_steps.is_multiple_of(self.target_update_interval) {
            self.update_target();
        }
        Ok(loss)
    }

    /// Builds a learner for `scenario` and copies every agent parameter of
    /// `source` whose name and shape match; mixer parameters are copied only
    /// when the whole mixer layout matches. Returns the learner and the names
    /// that were freshly initialized.
    pub fn transfer_from(
        source: &ParamStore,
        model_cfg: ModelConfig,
        mixer_cfg: MixerConfig,
        scenario: &ScenarioSpec,
        cfg: &TrainerConfig,
        seed: u64,
    ) -> Result<(Self, Vec<String>)> {
        let mut learner = Self::new(model_cfg, mixer_cfg, scenario, cfg, seed)?;
        let matches = |name: &str, store: &ParamStore| {
            let src = source
                .find(name)
                .map(|id| source.value(id).shape().to_vec());
            let dst = store.find(name).map(|id| store.value(id).shape().to_vec());
            src.is_some() && src == dst
        };
        let mixer_ok = learner
            .params
            .iter()
            .filter(|p| p.name.starts_with(crate::mixer::PARAM_PREFIX))
            .all(|p| matches(&p.name, &learner.params));
        let mut fresh = Vec::new();
        let names: Vec<String> = learner.params.iter().map(|p| p.name.clone()).collect();
        for name in names {
            let is_mixer = name.starts_with(crate::mixer::PARAM_PREFIX);
            if matches(&name, &learner.params) && (!is_mixer || mixer_ok) {
                let src = source.value(source.find(&name).expect("matched")).clone();
                let id = learner.params.find(&name).expect("own name");
                *learner.params.value_mut(id) = src;
            } else {
                fresh.push(name);
            }
        }
        learner.update_target();
        Ok((learner, fresh))
    }
}
