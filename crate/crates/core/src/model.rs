//! Entity transformer individual value function with policy decoupling,
//! plus the comparison heads (vanilla, aggregation, recurrent, mismatched).
//!
//! Every pipeline is evaluated one timestep at a time over a batch of
//! sequences: observations `[N, n_entities, feature::WIDTH]` and a hidden
//! carry produce Q-values `[N, 6 + n_enemy]` and the next carry.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entity::{
    feature, stack_observations, ActionGroupSpec, ObservationSet, N_BASIC_ACTIONS,
};
use crate::numerics::{
    gru_cell, BoundParams, GruWeights, Linear, NumericsError, ParamId, ParamStore, Tape, Tensor,
    Var,
};

/// Prefix of every agent-network parameter name.
pub const PARAM_PREFIX: &str = "agent.";

/// Value written into unavailable action entries.
pub const MASK_SENTINEL: f64 = f64::MIN;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $name {
            pub fn as_str(self) -> &'static str {
                match self { $(Self::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    _ => Err(format!(
                        "unknown {} {s:?}; expected one of: {}",
                        stringify!($name),
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockMode {
    /// Attention, residual, layer norm, feed-forward, residual, layer norm.
    Standard,
    /// Attention layers only.
    StrictEq5,
}
string_enum!(BlockMode { Standard => "standard", StrictEq5 => "strict_eq5" });

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    Updet,
    Vanilla,
    Aggregation,
    Gru,
    UpdetMismatched,
}
string_enum!(HeadMode {
    Updet => "updet",
    Vanilla => "vanilla",
    Aggregation => "aggregation",
    Gru => "gru",
    UpdetMismatched => "updet_mismatched",
});

impl HeadMode {
    /// Whether the parameter layout depends on the scenario size.
    pub fn is_scenario_sized(self) -> bool {
        matches!(self, Self::Vanilla | Self::Aggregation | Self::Gru)
    }

    pub fn is_transformer(self) -> bool {
        self != Self::Gru
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HiddenMode {
    /// One hidden token shared by the agent.
    Global,
    /// One hidden token per entity slot.
    Individual,
    /// No temporal carry.
    None,
}
string_enum!(HiddenMode { Global => "global", Individual => "individual", None => "none" });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_emb: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_channel: usize,
    pub block_mode: BlockMode,
    pub head_mode: HeadMode,
    pub hidden_mode: HiddenMode,
    /// Hidden width of the recurrent baseline.
    pub rnn_hidden: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_emb: 32,
            n_heads: 3,
            n_layers: 2,
            d_channel: 32,
            block_mode: BlockMode::Standard,
            head_mode: HeadMode::Updet,
            hidden_mode: HiddenMode::Global,
            rnn_hidden: 64,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Per-head query/key/value width, `ceil(d_emb / n_heads)`.
    pub fn head_dim(&self) -> usize {
        self.d_emb.div_ceil(self.n_heads)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_emb == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_channel == 0 {
            return Err(ModelError::Config(
                "d_emb, n_heads, n_layers and d_channel must be positive".into(),
            ));
        }
        if self.rnn_hidden == 0 {
            return Err(ModelError::Config("rnn_hidden must be positive".into()));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return Err(ModelError::Config("ln_eps must be positive".into()));
        }
        Ok(())
    }

    /// Width of one hidden-state slot.
    pub fn hidden_width(&self) -> usize {
        if self.head_mode == HeadMode::Gru {
            self.rnn_hidden
        } else {
            self.d_emb
        }
    }

    /// Hidden slots per agent for a scenario with `n_entities` entity rows.
    pub fn hidden_slots(&self, n_entities: usize) -> usize {
        if self.head_mode == HeadMode::Gru {
            return 1;
        }
        match self.hidden_mode {
            HiddenMode::Global => 1,
            HiddenMode::Individual => n_entities,
            HiddenMode::None => 0,
        }
    }
}

/// Temporal carry for a batch of agents: `[n, slots, width]`, or nothing
/// when the model keeps no history.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub tokens: Option<Tensor>,
}

impl HiddenState {
    pub fn none() -> Self {
        Self { tokens: None }
    }

    pub fn zeros(n: usize, slots: usize, width: usize) -> Self {
        if slots == 0 {
            return Self::none();
        }
        Self {
            tokens: Some(Tensor::zeros(&[n, slots, width])),
        }
    }

    /// Hidden state of the agents at `rows`, in that order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let Some(t) = &self.tokens else {
            return Self::none();
        };
        let per = t.len() / t.shape()[0];
        let mut data = Vec::with_capacity(rows.len() * per);
        for &r in rows {
            data.extend_from_slice(&t.data()[r * per..(r + 1) * per]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        Self {
            tokens: Some(Tensor::new(shape, data).expect("hidden rows")),
        }
    }
}

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    fn forward<'t>(&self, p: &BoundParams<'t>, x: Var<'t>, eps: f64) -> Result<Var<'t>> {
        Ok(x.layer_norm(p.get(self.gain), p.get(self.bias), eps)?)
    }
}

#[derive(Debug, Clone)]
struct FeedForward {
    norm1: Norm,
    ff1: Linear,
    ff2: Linear,
    norm2: Norm,
}

#[derive(Debug, Clone)]
struct Layer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ff: Option<FeedForward>,
}

#[derive(Debug, Clone)]
enum Decoder {
    /// Basic head on the self token, one shared attack head on enemy tokens.
    Decoupled {
        basic: Linear,
        attack: Linear,
        mismatched: bool,
    },
    /// Action `a` is scored from entity slot `a` by its own projection.
    Vanilla { proj: Linear },
    /// Mean of entity tokens, then one scenario-sized map.
    Aggregation { head: Linear },
}

#[derive(Debug, Clone)]
enum Arch {
    Transformer {
        embed: Linear,
        layers: Vec<Layer>,
        decoder: Decoder,
    },
    Recurrent {
        encoder: Linear,
        cell: GruWeights,
        head: Linear,
    },
}

/// Result of one batched timestep.
#[derive(Debug)]
pub struct StepOutput<'t> {
    /// `[N, 6 + n_enemy]`, unmasked.
    pub q: Var<'t>,
    pub hidden: Option<Var<'t>>,
    /// Per layer, `[N, heads, tokens, tokens]`.
    pub attention: Vec<Tensor>,
}

/// Raw and grouped attention weights for one observation.
#[derive(Debug, Clone)]
pub struct AttentionExport {
    /// Per layer, `[heads, tokens, tokens]`, hidden tokens included.
    pub layers: Vec<Tensor>,
    /// `[n_entities, n_entities]`: final layer, head-averaged, hidden rows and
    /// columns removed, rows renormalized.
    pub grouped: Tensor,
}

/// The shared agent network. Holds parameter ids; values live in a
/// [`ParamStore`] so online and target copies share one description.
#[derive(Debug, Clone)]
pub struct AgentModel {
    cfg: ModelConfig,
    groups: ActionGroupSpec,
    arch: Arch,
}

impl AgentModel {
    /// Registers parameters in `store` for a scenario with the given pairing.
    pub fn new<R: Rng + ?Sized>(
        cfg: ModelConfig,
        groups: ActionGroupSpec,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        check_vanilla(&cfg, &groups)?;
        let n_entities = groups.n_entities();
        let n_actions = groups.n_actions();
        let arch = if cfg.head_mode == HeadMode::Gru {
            let d_in = n_entities * feature::WIDTH;
            Arch::Recurrent {
                encoder: Linear::new(store, rng, "agent.gru.encoder", d_in, cfg.rnn_hidden),
                cell: GruWeights::new(store, rng, "agent.gru.cell", cfg.rnn_hidden, cfg.rnn_hidden),
                head: Linear::new(store, rng, "agent.gru.head", cfg.rnn_hidden, n_actions),
            }
        } else {
            let d = cfg.d_emb;
            let width = cfg.head_dim() * cfg.n_heads;
            let embed = Linear::new(store, rng, "agent.embed", feature::WIDTH, d);
            let layers = (0..cfg.n_layers)
                .map(|l| {
                    let name = format!("agent.layer{l}");
                    let q = Linear::new(store, rng, &format!("{name}.q"), d, width);
                    let k = Linear::new(store, rng, &format!("{name}.k"), d, width);
                    let v = Linear::new(store, rng, &format!("{name}.v"), d, width);
                    let o = Linear::new(store, rng, &format!("{name}.o"), width, d);
                    let ff = (cfg.block_mode == BlockMode::Standard).then(|| FeedForward {
                        norm1: Norm::new(store, &format!("{name}.norm1"), d),
                        ff1: Linear::new(store, rng, &format!("{name}.ff1"), d, cfg.d_channel),
                        ff2: Linear::new(store, rng, &format!("{name}.ff2"), cfg.d_channel, d),
                        norm2: Norm::new(store, &format!("{name}.norm2"), d),
                    });
                    Layer { q, k, v, o, ff }
                })
                .collect();
            let decoder = match cfg.head_mode {
                HeadMode::Updet | HeadMode::UpdetMismatched => Decoder::Decoupled {
                    basic: Linear::new(store, rng, "agent.basic_head", d, N_BASIC_ACTIONS),
                    attack: Linear::new(store, rng, "agent.attack_head", d, 1),
                    mismatched: cfg.head_mode == HeadMode::UpdetMismatched,
                },
                HeadMode::Vanilla => Decoder::Vanilla {
                    proj: Linear::new(store, rng, "agent.vanilla_head", d, n_actions),
                },
                HeadMode::Aggregation => Decoder::Aggregation {
                    head: Linear::new(store, rng, "agent.aggregation_head", d, n_actions),
                },
                HeadMode::Gru => unreachable!("handled above"),
            };
            Arch::Transformer {
                embed,
                layers,
                decoder,
            }
        };
        Ok(Self { cfg, groups, arch })
    }

    /// Builds a model in a fresh store from a seed.
    pub fn build(
        cfg: ModelConfig,
        groups: ActionGroupSpec,
        seed: u64,
    ) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Self::new(cfg, groups, &mut store, &mut rng)?;
        Ok((model, store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn groups(&self) -> ActionGroupSpec {
        self.groups
    }

    pub fn n_actions(&self) -> usize {
        self.groups.n_actions()
    }

    /// The same parameters applied to another scenario size. Fails for heads
    /// whose parameters are sized by the scenario.
    pub fn for_scenario(&self, groups: ActionGroupSpec) -> Result<Self> {
        if groups != self.groups && self.cfg.head_mode.is_scenario_sized() {
            return Err(ModelError::Unsupported(format!(
                "{} head parameters are sized for {} entities / {} actions; \
                 a scenario with {} entities / {} actions needs a rebuilt network",
                self.cfg.head_mode,
                self.groups.n_entities(),
                self.groups.n_actions(),
                groups.n_entities(),
                groups.n_actions()
            )));
        }
        check_vanilla(&self.cfg, &groups)?;
        Ok(Self {
            cfg: self.cfg.clone(),
            groups,
            arch: self.arch.clone(),
        })
    }

    /// Zero hidden state for `n` agents.
    pub fn initial_hidden(&self, n: usize) -> HiddenState {
        HiddenState::zeros(
            n,
            self.cfg.hidden_slots(self.groups.n_entities()),
            self.cfg.hidden_width(),
        )
    }

    /// One batched timestep. `obs` is `[N, n_entities, WIDTH]`; `hidden` is
    /// `[N, slots, width]` or `None` when the model has no carry.
    pub fn step<'t>(
        &self,
        p: &BoundParams<'t>,
        obs: Var<'t>,
        hidden: Option<Var<'t>>,
    ) -> Result<StepOutput<'t>> {
        let shape = obs.shape();
        let n_entities = self.groups.n_entities();
        if shape.len() != 3 || shape[1] != n_entities || shape[2] != feature::WIDTH {
            return Err(ModelError::Config(format!(
                "observation batch {shape:?} does not match {n_entities} entities of width {}",
                feature::WIDTH
            )));
        }
        let n = shape[0];
        let slots = self.cfg.hidden_slots(n_entities);
        match (&hidden, slots) {
            (None, 0) => {}
            (Some(h), s) if s > 0 => {
                let expected = vec![n, s, self.cfg.hidden_width()];
                if h.shape() != expected {
                    return Err(NumericsError::Shape {
                        op: "hidden_state",
                        lhs: h.shape(),
                        rhs: expected,
                    }
                    .into());
                }
            }
            _ => {
                return Err(ModelError::Config(format!(
                    "model expects {slots} hidden slots"
                )))
            }
        }
        match &self.arch {
            Arch::Recurrent {
                encoder,
                cell,
                head,
            } => {
                let h = hidden
                    .expect("checked")
                    .reshape(&[n, self.cfg.rnn_hidden])?;
                let x = encoder
                    .forward(p, obs.reshape(&[n, n_entities * feature::WIDTH])?)?
                    .relu()?;
                let h_next = gru_cell(p, cell, x, h)?;
                let q = head.forward(p, h_next)?;
                Ok(StepOutput {
                    q,
                    hidden: Some(h_next.reshape(&[n, 1, self.cfg.rnn_hidden])?),
                    attention: Vec::new(),
                })
            }
            Arch::Transformer {
                embed,
                layers,
                decoder,
            } => {
                let tokens = embed.forward(p, obs)?;
                let (out, new_hidden, attention) =
                    self.transformer_forward(p, layers, tokens, hidden)?;
                let q = self.decode(p, decoder, out)?;
                Ok(StepOutput {
                    q,
                    hidden: new_hidden,
                    attention,
                })
            }
        }
    }

    /// Runs the attention stack over `[hidden tokens, entity tokens]`.
    /// Returns entity output tokens, the new hidden tokens and per-layer
    /// attention weights.
    #[allow(clippy::type_complexity)]
    fn transformer_forward<'t>(
        &self,
        p: &BoundParams<'t>,
        layers: &[Layer],
        tokens: Var<'t>,
        hidden: Option<Var<'t>>,
    ) -> Result<(Var<'t>, Option<Var<'t>>, Vec<Tensor>)> {
        let n_entities = tokens.shape()[1];
        let slots = hidden.map(|h| h.shape()[1]).unwrap_or(0);
        let mut x = match hidden {
            Some(h) => Var::concat(&[h, tokens], 1)?,
            None => tokens,
        };
        let mut attention = Vec::with_capacity(layers.len());
        for layer in layers {
            let q = layer.q.forward(p, x)?;
            let k = layer.k.forward(p, x)?;
            let v = layer.v.forward(p, x)?;
            let (mixed, probs) = Var::attention(q, k, v, self.cfg.n_heads)?;
            attention.push(probs);
            let a = layer.o.forward(p, mixed)?;
            x = match &layer.ff {
                None => a,
                Some(ff) => {
                    let x1 = ff.norm1.forward(p, x.add(a)?, self.cfg.ln_eps)?;
                    let f = ff.ff2.forward(p, ff.ff1.forward(p, x1)?.relu()?)?;
                    ff.norm2.forward(p, x1.add(f)?, self.cfg.ln_eps)?
                }
            };
        }
        if slots == 0 {
            return Ok((x, None, attention));
        }
        let out = x.slice(1, slots, n_entities)?;
        let new_hidden = x.slice(1, 0, slots)?;
        Ok((out, Some(new_hidden), attention))
    }

    fn decode<'t>(&self, p: &BoundParams<'t>, decoder: &Decoder, out: Var<'t>) -> Result<Var<'t>> {
        let shape = out.shape();
        let (n, n_entities, d) = (shape[0], shape[1], shape[2]);
        let g = self.groups;
        match decoder {
            Decoder::Decoupled {
                basic,
                attack,
                mismatched,
            } => {
                let own = out.slice(1, 0, 1)?.reshape(&[n, d])?;
                let q_basic = basic.forward(p, own)?;
                let enemies = out.slice(1, g.enemy_slots().start, g.n_enemy)?;
                let mut q_attack = attack.forward(p, enemies)?.reshape(&[n, g.n_enemy])?;
                if *mismatched {
                    let ne = g.n_enemy;
                    let order: Vec<usize> = (0..ne).map(|j| (j + ne - 1) % ne).collect();
                    q_attack = q_attack.select(1, &order)?;
                }
                Ok(Var::concat(&[q_basic, q_attack], 1)?)
            }
            Decoder::Vanilla { proj } => {
                let a = g.n_actions();
                let all = proj.forward(p, out)?.reshape(&[n, n_entities * a])?;
                let diagonal: Vec<usize> = (0..a).map(|i| i * a + i).collect();
                Ok(all.select(1, &diagonal)?)
            }
            Decoder::Aggregation { head } => Ok(head.forward(p, out.mean_axis(1)?)?),
        }
    }

    /// Q-values for a batch of observation sets (no gradient kept).
    pub fn forward_batch(
        &self,
        store: &ParamStore,
        obs: &[ObservationSet],
        hidden: &HiddenState,
    ) -> Result<(Tensor, HiddenState)> {
        let tape = Tape::new();
        let p = tape.bind(store);
        let o = tape.constant(stack_observations(obs));
        let h = hidden.tokens.clone().map(|t| tape.constant(t));
        let out = self.step(&p, o, h)?;
        Ok((
            out.q.value(),
            HiddenState {
                tokens: out.hidden.map(|v| v.value()),
            },
        ))
    }

    /// Q-values for one agent.
    pub fn forward(
        &self,
        store: &ParamStore,
        obs: &ObservationSet,
        hidden: &HiddenState,
    ) -> Result<(Vec<f64>, HiddenState)> {
        let (q, h) = self.forward_batch(store, std::slice::from_ref(obs), hidden)?;
        Ok((q.into_data(), h))
    }

    /// Attention weights for one agent's observation.
    pub fn export_attention(
        &self,
        store: &ParamStore,
        obs: &ObservationSet,
        hidden: &HiddenState,
    ) -> Result<AttentionExport> {
        if !self.cfg.head_mode.is_transformer() {
            return Err(ModelError::Unsupported(format!(
                "{} head has no attention weights",
                self.cfg.head_mode
            )));
        }
        let tape = Tape::new();
        let p = tape.bind(store);
        let o = tape.constant(obs.to_tensor());
        let h = hidden.tokens.clone().map(|t| tape.constant(t));
        let out = self.step(&p, o, h)?;
        let heads = self.cfg.n_heads;
        let layers: Vec<Tensor> = out
            .attention
            .into_iter()
            .map(|t| {
                let tokens = t.shape()[2];
                t.reshape(&[heads, tokens, tokens]).expect("single agent")
            })
            .collect();
        let last = layers.last().expect("at least one layer");
        let tokens = last.shape()[1];
        let n_entities = obs.n_entities();
        let offset = tokens - n_entities;
        let mut grouped = vec![0.0; n_entities * n_entities];
        for h in 0..heads {
            for i in 0..n_entities {
                for j in 0..n_entities {
                    let src = (h * tokens + offset + i) * tokens + offset + j;
                    grouped[i * n_entities + j] += last.data()[src] / heads as f64;
                }
            }
        }
        for row in grouped.chunks_exact_mut(n_entities) {
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= total);
        }
        Ok(AttentionExport {
            layers,
            grouped: Tensor::new(vec![n_entities, n_entities], grouped)?,
        })
    }
}

fn check_vanilla(cfg: &ModelConfig, groups: &ActionGroupSpec) -> Result<()> {
    if cfg.head_mode == HeadMode::Vanilla && groups.n_actions() > groups.n_entities() {
        return Err(ModelError::Unsupported(format!(
            "vanilla head maps each entity token to at most one action; \
             {} actions exceed {} entities",
            groups.n_actions(),
            groups.n_entities()
        )));
    }
    Ok(())
}

/// Replaces unavailable entries with [`MASK_SENTINEL`].
pub fn apply_action_mask(q: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if q.len() != mask.len() {
        return Err(NumericsError::Shape {
            op: "apply_action_mask",
            lhs: vec![q.len()],
            rhs: vec![mask.len()],
        }
        .into());
    }
    if !mask.iter().any(|&m| m) {
        return Err(ModelError::InvalidState("no action is available".into()));
    }
    Ok(q.iter()
        .zip(mask)
        .map(|(&v, &m)| if m { v } else { MASK_SENTINEL })
        .collect())
}

/// Index of the largest available entry; ties go to the lowest index.
pub fn greedy_action(q: &[f64], mask: &[bool]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, (&v, &m)) in q.iter().zip(mask).enumerate() {
        if m && best.is_none_or(|b| v > q[b]) {
            best = Some(i);
        }
    }
    best
}
