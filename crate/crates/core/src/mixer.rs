//! Centralized mixers combining per-agent chosen Q-values into a team value.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{BoundParams, Linear, NumericsError, ParamStore, Result, Var};

/// Prefix of every mixer parameter name.
pub const PARAM_PREFIX: &str = "mixer.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixerKind {
    Vdn,
    Qmix,
}

impl fmt::Display for MixerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vdn => "vdn",
            Self::Qmix => "qmix",
        })
    }
}

impl FromStr for MixerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "vdn" => Ok(Self::Vdn),
            "qmix" => Ok(Self::Qmix),
            _ => Err(format!("unknown mixer {s:?}; expected vdn or qmix")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixerConfig {
    pub kind: MixerKind,
    pub mixing_embed: usize,
    pub hypernet_layers: usize,
    pub hypernet_embed: usize,
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self {
            kind: MixerKind::Vdn,
            mixing_embed: 32,
            hypernet_layers: 2,
            hypernet_embed: 64,
        }
    }
}

/// Hypernetwork producing a weight block from the state.
#[derive(Debug, Clone)]
struct Hyper {
    first: Linear,
    second: Option<Linear>,
}

impl Hyper {
    fn forward<'t>(&self, p: &BoundParams<'t>, state: Var<'t>) -> Result<Var<'t>> {
        let x = self.first.forward(p, state)?;
        match &self.second {
            Some(second) => second.forward(p, x.relu()?),
            None => Ok(x),
        }
    }
}

#[derive(Debug, Clone)]
struct Qmix {
    n_agents: usize,
    state_dim: usize,
    embed: usize,
    hyper_w1: Hyper,
    hyper_b1: Linear,
    hyper_w_final: Hyper,
    v_hidden: Linear,
    v_out: Linear,
}

/// `Q_tot = F(q_1, ..., q_n; s)`.
#[derive(Debug, Clone)]
pub struct Mixer {
    cfg: MixerConfig,
    qmix: Option<Qmix>,
}

impl Mixer {
    /// Registers mixer parameters (none for VDN) in `store`.
    pub fn new<R: Rng + ?Sized>(
        cfg: MixerConfig,
        n_agents: usize,
        state_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if n_agents == 0 {
            return Err(NumericsError::InvalidArgument(
                "mixer needs at least one agent".into(),
            ));
        }
        let qmix = match cfg.kind {
            MixerKind::Vdn => None,
            MixerKind::Qmix => {
                if !(1..=2).contains(&cfg.hypernet_layers) {
                    return Err(NumericsError::InvalidArgument(format!(
                        "hypernet_layers must be 1 or 2, got {}",
                        cfg.hypernet_layers
                    )));
                }
                if state_dim == 0 || cfg.mixing_embed == 0 || cfg.hypernet_embed == 0 {
                    return Err(NumericsError::InvalidArgument(
                        "qmix needs a state and positive embedding widths".into(),
                    ));
                }
                let e = cfg.mixing_embed;
                let hyper = |store: &mut ParamStore, rng: &mut R, name: &str, out: usize| {
                    if cfg.hypernet_layers == 2 {
                        let h = cfg.hypernet_embed;
                        Hyper {
                            first: Linear::new(store, rng, &format!("{name}.0"), state_dim, h),
                            second: Some(Linear::new(store, rng, &format!("{name}.1"), h, out)),
                        }
                    } else {
                        Hyper {
                            first: Linear::new(store, rng, &format!("{name}.0"), state_dim, out),
                            second: None,
                        }
                    }
                };
                let hyper_w1 = hyper(store, rng, "mixer.hyper_w1", n_agents * e);
                let hyper_b1 = Linear::new(store, rng, "mixer.hyper_b1", state_dim, e);
                let hyper_w_final = hyper(store, rng, "mixer.hyper_w_final", e);
                let v_hidden = Linear::new(store, rng, "mixer.v.0", state_dim, e);
                let v_out = Linear::new(store, rng, "mixer.v.1", e, 1);
                Some(Qmix {
                    n_agents,
                    state_dim,
                    embed: e,
                    hyper_w1,
                    hyper_b1,
                    hyper_w_final,
                    v_hidden,
                    v_out,
                })
            }
        };
        Ok(Self { cfg, qmix })
    }

    pub fn config(&self) -> &MixerConfig {
        &self.cfg
    }

    pub fn kind(&self) -> MixerKind {
        self.cfg.kind
    }

    /// `q: [N, n_agents]`, `state: [N, state_dim]` -> `[N]`.
    pub fn mix<'t>(
        &self,
        p: &BoundParams<'t>,
        q: Var<'t>,
        state: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        let qs = q.shape();
        if qs.len() != 2 {
            return Err(NumericsError::Shape {
                op: "mix",
                lhs: qs,
                rhs: vec![],
            });
        }
        let Some(m) = &self.qmix else {
            return q.sum_axis(1);
        };
        let n = qs[0];
        let state = state.ok_or_else(|| {
            NumericsError::InvalidArgument("qmix requires the global state".into())
        })?;
        let ss = state.shape();
        if qs[1] != m.n_agents || ss != [n, m.state_dim] {
            return Err(NumericsError::Shape {
                op: "qmix_mix",
                lhs: qs,
                rhs: ss,
            });
        }
        let e = m.embed;
        let w1 = m
            .hyper_w1
            .forward(p, state)?
            .abs()?
            .reshape(&[n, m.n_agents, e])?;
        let b1 = m.hyper_b1.forward(p, state)?.reshape(&[n, 1, e])?;
        let hidden = q.reshape(&[n, 1, m.n_agents])?.bmm(w1)?.add(b1)?.relu()?;
        let w_final = m
            .hyper_w_final
            .forward(p, state)?
            .abs()?
            .reshape(&[n, e, 1])?;
        let v = m.v_out.forward(p, m.v_hidden.forward(p, state)?.relu()?)?;
        hidden.bmm(w_final)?.reshape(&[n, 1])?.add(v)?.reshape(&[n])
    }
}
