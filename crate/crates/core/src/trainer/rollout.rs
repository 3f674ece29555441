use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::battlesim::{BattleEnv, ScenarioSpec};
use crate::model::{greedy_action, AgentModel};
use crate::numerics::ParamStore;

use super::{Episode, Result};

/// Summary of one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub len: usize,
    pub episode_return: f64,
    pub win: bool,
}

/// Aggregate greedy-evaluation statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub episodes: usize,
    pub win_rate: f64,
    pub mean_return: f64,
    pub mean_len: f64,
}

/// Environment seed of evaluation episode `i`; disjoint from training seeds
/// in practice because training draws seeds from a 64-bit generator.
pub fn evaluation_seed(i: usize) -> u64 {
    0xE7A1_0000_0000 + i as u64
}

/// Plays one episode from the environment's current reset state.
///
/// Each tick every agent picks uniformly among its available actions with
/// probability `epsilon` and greedily otherwise (ties to the lowest index).
/// Hidden states start at zero and persist only within the episode.
pub fn rollout_episode<R: Rng + ?Sized>(
    env: &mut BattleEnv,
    model: &AgentModel,
    store: &ParamStore,
    epsilon: f64,
    rng: &mut R,
) -> Result<(Episode, EpisodeStats)> {
    let spec = env.spec().clone();
    let model = model.for_scenario(spec.action_groups())?;
    let n = spec.n_ally;
    let mut episode = Episode::new(n, spec.n_entities(), spec.n_actions(), spec.state_width());
    let mut step = env.reset();
    let mut hidden = model.initial_hidden(n);
    loop {
        let (q, next_hidden) = model.forward_batch(store, &step.observations, &hidden)?;
        hidden = next_hidden;
        let a_dim = spec.n_actions();
        let mut actions = Vec::with_capacity(n);
        for (i, mask) in step.avail_actions.iter().enumerate() {
            let explore = epsilon > 0.0 && rng.gen::<f64>() < epsilon;
            let action = if explore {
                let avail: Vec<usize> = (0..a_dim).filter(|&a| mask[a]).collect();
                avail[rng.gen_range(0..avail.len())]
            } else {
                greedy_action(&q.data()[i * a_dim..(i + 1) * a_dim], mask)
                    .expect("no-op is always available")
            };
            actions.push(action);
        }
        let next = env.step(&actions)?;
        episode.push(
            &step.observations,
            &step.avail_actions,
            &actions,
            next.reward,
            next.terminal,
            &step.state,
        )?;
        if next.terminal {
            episode.win = next.win;
            break;
        }
        step = next;
    }
    let stats = EpisodeStats {
        len: episode.len(),
        episode_return: episode.episode_return(),
        win: episode.win,
    };
    Ok((episode, stats))
}

fn evaluate_range(
    spec: &ScenarioSpec,
    model: &AgentModel,
    store: &ParamStore,
    range: std::ops::Range<usize>,
) -> Result<Vec<EpisodeStats>> {
    let mut out = Vec::with_capacity(range.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for i in range {
        let mut env = BattleEnv::new(spec.clone().with_seed(evaluation_seed(i)))?;
        let (_, stats) = rollout_episode(&mut env, model, store, 0.0, &mut rng)?;
        out.push(stats);
    }
    Ok(out)
}

/// Greedy play on `episodes` fixed evaluation seeds. No parameters or
/// buffers are touched; results do not depend on `threads`.
pub fn evaluate(
    spec: &ScenarioSpec,
    model: &AgentModel,
    store: &ParamStore,
    episodes: usize,
    threads: usize,
) -> Result<EvalStats> {
    let threads = threads.clamp(1, episodes.max(1));
    let stats: Vec<EpisodeStats> = if threads == 1 {
        evaluate_range(spec, model, store, 0..episodes)?
    } else {
        let chunk = episodes.div_ceil(threads);
        let parts: Vec<Result<Vec<EpisodeStats>>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    let range = (w * chunk).min(episodes)..((w + 1) * chunk).min(episodes);
                    s.spawn(move || evaluate_range(spec, model, store, range))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation worker panicked"))
                .collect()
        });
        let mut all = Vec::with_capacity(episodes);
        for part in parts {
            all.extend(part?);
        }
        all
    };
    let count = stats.len().max(1) as f64;
    Ok(EvalStats {
        episodes: stats.len(),
        win_rate: stats.iter().filter(|s| s.win).count() as f64 / count,
        mean_return: stats.iter().map(|s| s.episode_return).sum::<f64>() / count,
        mean_len: stats.iter().map(|s| s.len as f64).sum::<f64>() / count,
    })
}
