//! Entity observations and the entity-to-action-group pairing.
//!
//! Every observed unit is encoded as one fixed-width feature row, so the same
//! embedding applies to any team size. Row order inside an
//! [`ObservationSet`] is always: self, allies (scenario order), enemies
//! (scenario order). [`ActionGroupSpec`] relies on that order to pair the
//! self row with the basic actions and each enemy row with its attack action.

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

/// Largest team size any scenario may use.
pub const MAX_TEAM_SIZE: usize = 10;
/// no-op, stop, north, south, east, west.
pub const N_BASIC_ACTIONS: usize = 6;
/// Width of the last-action one-hot; covers every scenario.
pub const MAX_ACTIONS: usize = N_BASIC_ACTIONS + MAX_TEAM_SIZE;

pub const ACTION_NOOP: usize = 0;
pub const ACTION_STOP: usize = 1;
pub const ACTION_NORTH: usize = 2;
pub const ACTION_SOUTH: usize = 3;
pub const ACTION_EAST: usize = 4;
pub const ACTION_WEST: usize = 5;
pub const ACTION_ATTACK_BASE: usize = N_BASIC_ACTIONS;

/// Column offsets inside an entity feature row.
pub mod feature {
    use super::MAX_ACTIONS;

    pub const KIND_SELF: usize = 0;
    pub const KIND_ALLY: usize = 1;
    pub const KIND_ENEMY: usize = 2;
    pub const HEALTH: usize = 3;
    pub const COOLDOWN: usize = 4;
    pub const LAST_ACTION: usize = 5;
    pub const DX: usize = LAST_ACTION + MAX_ACTIONS;
    pub const DY: usize = DX + 1;
    pub const DISTANCE: usize = DY + 1;
    pub const ALIVE: usize = DISTANCE + 1;
    /// Total width of one entity row.
    pub const WIDTH: usize = ALIVE + 1;
}

/// Feature rows for one agent at one tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    /// Number of other allies (the observing agent is not counted).
    pub n_ally: usize,
    pub n_enemy: usize,
    /// Row-major `[n_entities, feature::WIDTH]`.
    pub features: Vec<f64>,
}

impl ObservationSet {
    pub fn zeros(n_ally: usize, n_enemy: usize) -> Self {
        Self {
            n_ally,
            n_enemy,
            features: vec![0.0; (1 + n_ally + n_enemy) * feature::WIDTH],
        }
    }

    pub fn n_entities(&self) -> usize {
        1 + self.n_ally + self.n_enemy
    }

    pub fn entity(&self, slot: usize) -> &[f64] {
        &self.features[slot * feature::WIDTH..(slot + 1) * feature::WIDTH]
    }

    pub fn entity_mut(&mut self, slot: usize) -> &mut [f64] {
        &mut self.features[slot * feature::WIDTH..(slot + 1) * feature::WIDTH]
    }

    pub fn ally_slot(&self, ally: usize) -> usize {
        1 + ally
    }

    pub fn enemy_slot(&self, enemy: usize) -> usize {
        1 + self.n_ally + enemy
    }

    /// `[1, n_entities, WIDTH]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, self.n_entities(), feature::WIDTH],
            self.features.clone(),
        )
        .expect("observation layout")
    }

    /// Reorders entity rows: new slot `i` takes old slot `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        debug_assert_eq!(order.len(), self.n_entities());
        let mut out = self.clone();
        for (new, &old) in order.iter().enumerate() {
            out.entity_mut(new).copy_from_slice(self.entity(old));
        }
        out
    }
}

/// Stacks observation sets of identical layout into `[n, n_entities, WIDTH]`.
pub fn stack_observations(obs: &[ObservationSet]) -> Tensor {
    let first = &obs[0];
    let mut data = Vec::with_capacity(obs.len() * first.features.len());
    for o in obs {
        debug_assert_eq!(o.n_entities(), first.n_entities());
        data.extend_from_slice(&o.features);
    }
    Tensor::new(vec![obs.len(), first.n_entities(), feature::WIDTH], data)
        .expect("stacked observation layout")
}

/// Pairing of entity slots with action groups.
///
/// The basic group (no-op, stop, four moves) belongs to slot 0; attack `j`
/// belongs to enemy slot `1 + n_ally + j`; ally slots own no actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionGroupSpec {
    pub n_ally: usize,
    pub n_enemy: usize,
}

impl ActionGroupSpec {
    pub fn new(n_ally: usize, n_enemy: usize) -> Self {
        Self { n_ally, n_enemy }
    }

    pub fn n_actions(&self) -> usize {
        N_BASIC_ACTIONS + self.n_enemy
    }

    pub fn n_entities(&self) -> usize {
        1 + self.n_ally + self.n_enemy
    }

    pub fn basic_group(&self) -> std::ops::Range<usize> {
        0..N_BASIC_ACTIONS
    }

    pub fn attack_action(&self, enemy: usize) -> usize {
        ACTION_ATTACK_BASE + enemy
    }

    pub fn enemy_slots(&self) -> std::ops::Range<usize> {
        1 + self.n_ally..1 + self.n_ally + self.n_enemy
    }

    /// Entity slot owning `action`, or `None` if out of range.
    pub fn slot_for_action(&self, action: usize) -> Option<usize> {
        if action < N_BASIC_ACTIONS {
            Some(0)
        } else if action < self.n_actions() {
            Some(1 + self.n_ally + action - N_BASIC_ACTIONS)
        } else {
            None
        }
    }
}
