//! Deterministic grid micro-battle between a learned team and a scripted team.
//!
//! Ticks resolve in a fixed order: scripted enemy decisions, all moves, all
//! attacks (simultaneous, against hp at tick start), cooldown decay, deaths,
//! termination. Rewards are shared by the whole team and derive from integer
//! damage bookkeeping so they can be audited exactly.

use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entity::{
    feature, ActionGroupSpec, ObservationSet, ACTION_ATTACK_BASE, ACTION_EAST, ACTION_NOOP,
    ACTION_NORTH, ACTION_SOUTH, ACTION_STOP, ACTION_WEST, MAX_ACTIONS, MAX_TEAM_SIZE,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("agent {agent} submitted unavailable action {action}")]
    UnavailableAction { agent: usize, action: usize },
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("episode already terminated")]
    EpisodeOver,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub n_ally: usize,
    pub n_enemy: usize,
    pub grid_w: i32,
    pub grid_h: i32,
    pub unit_hp: u32,
    pub attack_damage: u32,
    pub attack_range: f64,
    pub view_radius: f64,
    pub max_cooldown: u32,
    pub max_steps: u32,
    pub win_bonus: f64,
    /// Width in columns of each team's spawn band (allies left, enemies right).
    pub spawn_band: i32,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            n_ally: 3,
            n_enemy: 3,
            grid_w: 12,
            grid_h: 12,
            unit_hp: 10,
            attack_damage: 2,
            attack_range: 2.5,
            view_radius: 6.0,
            max_cooldown: 2,
            max_steps: 60,
            win_bonus: 2.0,
            spawn_band: 2,
            seed: 0,
        }
    }
}

impl ScenarioSpec {
    pub fn new(n_ally: usize, n_enemy: usize) -> Self {
        Self {
            n_ally,
            n_enemy,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn n_actions(&self) -> usize {
        ACTION_ATTACK_BASE + self.n_enemy
    }

    /// Pairing used by the observation layout of every agent.
    pub fn action_groups(&self) -> ActionGroupSpec {
        ActionGroupSpec::new(self.n_ally - 1, self.n_enemy)
    }

    pub fn n_entities(&self) -> usize {
        self.n_ally + self.n_enemy
    }

    /// Width of [`StepResult::state`].
    pub fn state_width(&self) -> usize {
        STATE_FIELDS * (self.n_ally + self.n_enemy)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let fail = |m: String| Err(EnvError::Config(m));
        if self.n_ally == 0 || self.n_enemy == 0 {
            return fail("both teams need at least one unit".into());
        }
        if self.n_ally > MAX_TEAM_SIZE || self.n_enemy > MAX_TEAM_SIZE {
            return fail(format!("team sizes are capped at {MAX_TEAM_SIZE}"));
        }
        if self.attack_range > self.view_radius {
            return fail("attack_range must not exceed view_radius".into());
        }
        if self.max_steps == 0 || self.unit_hp == 0 || self.view_radius <= 0.0 {
            return fail("max_steps, unit_hp and view_radius must be positive".into());
        }
        if self.spawn_band < 1 || 2 * self.spawn_band > self.grid_w || self.grid_h < 1 {
            return fail("spawn bands do not fit the grid".into());
        }
        let capacity = (self.spawn_band * self.grid_h) as usize;
        if self.n_ally > capacity || self.n_enemy > capacity {
            return fail(format!(
                "spawn band holds {capacity} units, scenario needs {}v{}",
                self.n_ally, self.n_enemy
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Team {
    Ally,
    Enemy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitState {
    pub team: Team,
    pub x: i32,
    pub y: i32,
    pub hp: u32,
    pub cooldown: u32,
    pub alive: bool,
    pub last_action: usize,
}

/// Per-unit fields in the global state vector.
pub const STATE_FIELDS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observations: Vec<ObservationSet>,
    pub avail_actions: Vec<Vec<bool>>,
    /// Shared team reward for the tick.
    pub reward: f64,
    pub terminal: bool,
    pub win: bool,
    /// Concatenated per-unit `[hp, cooldown, x, y, alive]`, allies first.
    pub state: Vec<f64>,
    /// Capped damage dealt to enemies this tick.
    pub damage_dealt: u32,
    /// Capped damage received by allies this tick.
    pub damage_received: u32,
}

/// One line of an exported episode trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub tick: u32,
    pub units: Vec<UnitState>,
    /// Actions applied this tick, allies then enemies; empty for the reset record.
    pub actions: Vec<usize>,
    pub reward: f64,
}

#[derive(Debug, Clone)]
pub struct BattleEnv {
    spec: ScenarioSpec,
    /// Allies first, then enemies.
    units: Vec<UnitState>,
    tick: u32,
    terminal: bool,
    win: bool,
    trace: Option<Vec<TraceRecord>>,
}

fn dist2(a: &UnitState, b: &UnitState) -> i64 {
    let dx = (a.x - b.x) as i64;
    let dy = (a.y - b.y) as i64;
    dx * dx + dy * dy
}

fn within(a: &UnitState, b: &UnitState, radius: f64) -> bool {
    (dist2(a, b) as f64) <= radius * radius
}

impl BattleEnv {
    /// Builds an environment and places units for `spec.seed`.
    pub fn new(spec: ScenarioSpec) -> Result<Self, EnvError> {
        spec.validate()?;
        let mut env = Self {
            spec,
            units: Vec::new(),
            tick: 0,
            terminal: false,
            win: false,
            trace: None,
        };
        env.place_units(env.spec.seed);
        Ok(env)
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn units(&self) -> &[UnitState] {
        &self.units
    }

    pub fn tick(&self) -> u32 {
        self.tick
    }

    pub fn is_terminal(&self) -> bool {
        self.terminal
    }

    /// Starts recording [`TraceRecord`]s from the next reset.
    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> Option<&[TraceRecord]> {
        self.trace.as_deref()
    }

    /// Writes the recorded trace as JSON lines.
    pub fn write_trace<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for rec in self.trace.iter().flatten() {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    fn place_units(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = &self.spec;
        let band_cells = (s.spawn_band * s.grid_h) as usize;
        let mut units = Vec::with_capacity(s.n_ally + s.n_enemy);
        for (team, count, x0) in [
            (Team::Ally, s.n_ally, 0),
            (Team::Enemy, s.n_enemy, s.grid_w - s.spawn_band),
        ] {
            let mut cells = sample(&mut rng, band_cells, count).into_vec();
            cells.sort_unstable();
            for c in cells {
                let c = c as i32;
                units.push(UnitState {
                    team,
                    x: x0 + c / s.grid_h,
                    y: c % s.grid_h,
                    hp: s.unit_hp,
                    cooldown: 0,
                    alive: true,
                    last_action: ACTION_NOOP,
                });
            }
        }
        self.units = units;
    }

    /// Resets to the scenario seed.
    pub fn reset(&mut self) -> StepResult {
        self.reset_with_seed(self.spec.seed)
    }

    pub fn reset_with_seed(&mut self, seed: u64) -> StepResult {
        self.place_units(seed);
        self.tick = 0;
        self.terminal = false;
        self.win = false;
        if let Some(trace) = self.trace.as_mut() {
            trace.clear();
            trace.push(TraceRecord {
                tick: 0,
                units: self.units.clone(),
                actions: Vec::new(),
                reward: 0.0,
            });
        }
        self.result(0.0, 0, 0)
    }

    fn ally(&self, i: usize) -> &UnitState {
        &self.units[i]
    }

    fn enemy(&self, j: usize) -> &UnitState {
        &self.units[self.spec.n_ally + j]
    }

    fn can_move(&self, u: &UnitState, action: usize) -> bool {
        match action {
            ACTION_NORTH => u.y + 1 < self.spec.grid_h,
            ACTION_SOUTH => u.y > 0,
            ACTION_EAST => u.x + 1 < self.spec.grid_w,
            ACTION_WEST => u.x > 0,
            _ => false,
        }
    }

    /// Availability mask of length `6 + n_enemy` for ally `agent`.
    pub fn available_actions(&self, agent: usize) -> Vec<bool> {
        let mut mask = vec![false; self.spec.n_actions()];
        mask[ACTION_NOOP] = true;
        let me = self.ally(agent);
        if !me.alive {
            return mask;
        }
        mask[ACTION_STOP] = true;
        for a in [ACTION_NORTH, ACTION_SOUTH, ACTION_EAST, ACTION_WEST] {
            mask[a] = self.can_move(me, a);
        }
        if me.cooldown == 0 {
            for j in 0..self.spec.n_enemy {
                let e = self.enemy(j);
                mask[ACTION_ATTACK_BASE + j] = e.alive && within(me, e, self.spec.attack_range);
            }
        }
        mask
    }

    /// Scripted decision for enemy `j`: attack the nearest living ally when in
    /// range and ready, otherwise step toward it, otherwise stop.
    ///
    /// The nearest ally is chosen by squared distance, then smaller x, then
    /// smaller y. The opponent sees the full state.
    pub fn scripted_action(&self, j: usize) -> usize {
        let me = self.enemy(j);
        if !me.alive {
            return ACTION_NOOP;
        }
        let target = (0..self.spec.n_ally)
            .filter(|&i| self.ally(i).alive)
            .min_by_key(|&i| {
                let a = self.ally(i);
                (dist2(me, a), a.x, a.y, i)
            });
        let Some(t) = target else {
            return ACTION_STOP;
        };
        let a = self.ally(t);
        if me.cooldown == 0 && within(me, a, self.spec.attack_range) {
            return ACTION_ATTACK_BASE + t;
        }
        let (dx, dy) = (a.x - me.x, a.y - me.y);
        if dx == 0 && dy == 0 {
            ACTION_STOP
        } else if dx.abs() >= dy.abs() {
            if dx > 0 {
                ACTION_EAST
            } else {
                ACTION_WEST
            }
        } else if dy > 0 {
            ACTION_NORTH
        } else {
            ACTION_SOUTH
        }
    }

    /// Advances one tick with the allies' joint action.
    pub fn step(&mut self, actions: &[usize]) -> Result<StepResult, EnvError> {
        if self.terminal {
            return Err(EnvError::EpisodeOver);
        }
        let (n_ally, n_enemy) = (self.spec.n_ally, self.spec.n_enemy);
        if actions.len() != n_ally {
            return Err(EnvError::ActionCount {
                expected: n_ally,
                got: actions.len(),
            });
        }
        for (agent, &action) in actions.iter().enumerate() {
            if !self
                .available_actions(agent)
                .get(action)
                .copied()
                .unwrap_or(false)
            {
                return Err(EnvError::UnavailableAction { agent, action });
            }
        }
        let mut joint: Vec<usize> = actions.to_vec();
        joint.extend((0..n_enemy).map(|j| self.scripted_action(j)));

        let alive_at_start: Vec<bool> = self.units.iter().map(|u| u.alive).collect();
        let cooldown_at_start: Vec<u32> = self.units.iter().map(|u| u.cooldown).collect();

        for (u, &a) in joint.iter().enumerate() {
            if !alive_at_start[u] {
                continue;
            }
            let (w, h) = (self.spec.grid_w, self.spec.grid_h);
            let unit = &mut self.units[u];
            match a {
                ACTION_NORTH => unit.y = (unit.y + 1).min(h - 1),
                ACTION_SOUTH => unit.y = (unit.y - 1).max(0),
                ACTION_EAST => unit.x = (unit.x + 1).min(w - 1),
                ACTION_WEST => unit.x = (unit.x - 1).max(0),
                _ => {}
            }
        }

        // Attacks resolve against hp at tick start; simultaneous hits on the
        // same target are capped at its remaining hp in attacker order.
        let mut remaining: Vec<u32> = self.units.iter().map(|u| u.hp).collect();
        let (mut dealt, mut received) = (0u32, 0u32);
        for (u, &a) in joint.iter().enumerate() {
            if !alive_at_start[u] || a < ACTION_ATTACK_BASE || cooldown_at_start[u] > 0 {
                continue;
            }
            let is_ally = u < n_ally;
            let target = if is_ally {
                n_ally + (a - ACTION_ATTACK_BASE)
            } else {
                a - ACTION_ATTACK_BASE
            };
            if !alive_at_start[target]
                || !within(&self.units[u], &self.units[target], self.spec.attack_range)
            {
                continue;
            }
            self.units[u].cooldown = self.spec.max_cooldown;
            let hit = self.spec.attack_damage.min(remaining[target]);
            remaining[target] -= hit;
            if is_ally {
                dealt += hit;
            } else {
                received += hit;
            }
        }

        for (u, unit) in self.units.iter_mut().enumerate() {
            unit.cooldown = unit.cooldown.saturating_sub(1);
            unit.hp = remaining[u];
            unit.alive = unit.hp > 0;
            unit.last_action = if alive_at_start[u] {
                joint[u]
            } else {
                ACTION_NOOP
            };
        }

        self.tick += 1;
        let allies_alive = self.units[..n_ally].iter().any(|u| u.alive);
        let enemies_alive = self.units[n_ally..].iter().any(|u| u.alive);
        self.win = !enemies_alive;
        self.terminal = !allies_alive || !enemies_alive || self.tick >= self.spec.max_steps;

        let mut reward = (dealt as f64 - received as f64) / self.spec.unit_hp as f64;
        if self.win {
            reward += self.spec.win_bonus;
        }
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceRecord {
                tick: self.tick,
                units: self.units.clone(),
                actions: joint,
                reward,
            });
        }
        Ok(self.result(reward, dealt, received))
    }

    fn result(&self, reward: f64, dealt: u32, received: u32) -> StepResult {
        StepResult {
            observations: (0..self.spec.n_ally).map(|i| self.observe(i)).collect(),
            avail_actions: (0..self.spec.n_ally)
                .map(|i| self.available_actions(i))
                .collect(),
            reward,
            terminal: self.terminal,
            win: self.win,
            state: self.global_state(),
            damage_dealt: dealt,
            damage_received: received,
        }
    }

    fn write_entity(&self, row: &mut [f64], me: &UnitState, other: &UnitState, kind: usize) {
        let s = &self.spec;
        row[kind] = 1.0;
        row[feature::HEALTH] = other.hp as f64 / s.unit_hp as f64;
        if other.team == Team::Ally && s.max_cooldown > 0 {
            row[feature::COOLDOWN] = other.cooldown as f64 / s.max_cooldown as f64;
        }
        if other.last_action < MAX_ACTIONS {
            row[feature::LAST_ACTION + other.last_action] = 1.0;
        }
        let dx = (other.x - me.x) as f64;
        let dy = (other.y - me.y) as f64;
        row[feature::DX] = dx / s.view_radius;
        row[feature::DY] = dy / s.view_radius;
        row[feature::DISTANCE] = (dx * dx + dy * dy).sqrt() / s.view_radius;
        row[feature::ALIVE] = 1.0;
    }

    /// Local observation of ally `agent`; all zeros once it is dead.
    pub fn observe(&self, agent: usize) -> ObservationSet {
        let s = &self.spec;
        let mut obs = ObservationSet::zeros(s.n_ally - 1, s.n_enemy);
        let me = self.ally(agent);
        if !me.alive {
            return obs;
        }
        self.write_entity(obs.entity_mut(0), me, me, feature::KIND_SELF);
        let others = (0..s.n_ally).filter(|&i| i != agent);
        for (k, i) in others.enumerate() {
            let other = self.ally(i);
            if other.alive && within(me, other, s.view_radius) {
                let slot = obs.ally_slot(k);
                self.write_entity(obs.entity_mut(slot), me, other, feature::KIND_ALLY);
            }
        }
        for j in 0..s.n_enemy {
            let e = self.enemy(j);
            if e.alive && within(me, e, s.view_radius) {
                let slot = obs.enemy_slot(j);
                self.write_entity(obs.entity_mut(slot), me, e, feature::KIND_ENEMY);
            }
        }
        obs
    }

    /// Full state for centralized mixers.
    pub fn global_state(&self) -> Vec<f64> {
        let s = &self.spec;
        let mut out = Vec::with_capacity(s.state_width());
        for u in &self.units {
            out.push(u.hp as f64 / s.unit_hp as f64);
            out.push(if s.max_cooldown > 0 {
                u.cooldown as f64 / s.max_cooldown as f64
            } else {
                0.0
            });
            out.push(u.x as f64 / (s.grid_w - 1).max(1) as f64);
            out.push(u.y as f64 / (s.grid_h - 1).max(1) as f64);
            out.push(if u.alive { 1.0 } else { 0.0 });
        }
        out
    }

    /// Overrides unit state; used to stage specific situations.
    pub fn set_units(&mut self, units: Vec<UnitState>) -> Result<(), EnvError> {
        if units.len() != self.units.len() {
            return Err(EnvError::Config("unit count mismatch".into()));
        }
        for u in &units {
            if u.x < 0 || u.y < 0 || u.x >= self.spec.grid_w || u.y >= self.spec.grid_h {
                return Err(EnvError::Config("unit outside the grid".into()));
            }
            if u.alive != (u.hp > 0) {
                return Err(EnvError::Config("alive flag must match hp".into()));
            }
        }
        self.units = units;
        self.terminal = false;
        Ok(())
    }

    /// Observation/mask/state snapshot of the current tick without stepping.
    pub fn snapshot(&self) -> StepResult {
        self.result(0.0, 0, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(team: Team, x: i32, y: i32, hp: u32) -> UnitState {
        UnitState {
            team,
            x,
            y,
            hp,
            cooldown: 0,
            alive: hp > 0,
            last_action: ACTION_NOOP,
        }
    }

    fn staged(n_ally: usize, n_enemy: usize, units: Vec<UnitState>) -> BattleEnv {
        let mut env = BattleEnv::new(ScenarioSpec::new(n_ally, n_enemy)).unwrap();
        env.set_units(units).unwrap();
        env
    }

    #[test]
    fn reset_places_full_health_units() {
        let mut env = BattleEnv::new(ScenarioSpec::default()).unwrap();
        let r = env.reset();
        assert_eq!(env.units().iter().filter(|u| u.alive).count(), 6);
        assert!(env.units().iter().all(|u| u.hp == 10 && u.cooldown == 0));
        assert_eq!(r.reward, 0.0);
        assert!(!r.terminal);
        assert_eq!(r, env.reset());

        let env = BattleEnv::new(ScenarioSpec::new(1, 1)).unwrap();
        assert_eq!(env.units().len(), 2);
    }

    #[test]
    fn oversized_teams_are_rejected() {
        let spec = ScenarioSpec {
            spawn_band: 1,
            grid_h: 4,
            ..ScenarioSpec::new(5, 3)
        };
        assert!(matches!(BattleEnv::new(spec), Err(EnvError::Config(_))));
    }

    #[test]
    fn out_of_range_attack_is_a_miss() {
        let mut env = staged(
            1,
            1,
            vec![unit(Team::Ally, 5, 5, 10), unit(Team::Enemy, 5, 7, 10)],
        );
        assert!(env.available_actions(0)[ACTION_ATTACK_BASE]);
        // The ally steps away, leaving range before attacks resolve.
        let mut u = env.units().to_vec();
        u[1].cooldown = 1;
        env.set_units(u).unwrap();
        let r = env.step(&[ACTION_STOP]).unwrap();
        assert_eq!(r.damage_dealt, 0);
        let mut u = env.units().to_vec();
        u[0] = unit(Team::Ally, 5, 5, 10);
        u[1] = unit(Team::Enemy, 5, 8, 10);
        u[1].cooldown = 2;
        env.set_units(u).unwrap();
        assert!(!env.available_actions(0)[ACTION_ATTACK_BASE]);
    }

    #[test]
    fn simultaneous_kill_caps_damage() {
        let mut env = staged(
            2,
            1,
            vec![
                unit(Team::Ally, 4, 4, 10),
                unit(Team::Ally, 4, 5, 10),
                unit(Team::Enemy, 6, 4, 1),
            ],
        );
        let mut u = env.units().to_vec();
        u[2].cooldown = 1;
        env.set_units(u).unwrap();
        let r = env.step(&[ACTION_ATTACK_BASE, ACTION_ATTACK_BASE]).unwrap();
        assert_eq!(r.damage_dealt, 1);
        assert!(!env.units()[2].alive);
        assert_eq!(env.units()[2].hp, 0);
        // both attacks counted as effective: both attackers cool down
        assert_eq!(env.units()[0].cooldown, 1);
        assert_eq!(env.units()[1].cooldown, 1);
        assert!(r.terminal && r.win);
        assert_eq!(r.reward, 0.1 + 2.0);
        assert_eq!(
            env.step(&[ACTION_NOOP, ACTION_NOOP]),
            Err(EnvError::EpisodeOver)
        );
    }

    #[test]
    fn unavailable_action_is_a_protocol_error() {
        let mut env = staged(
            1,
            1,
            vec![unit(Team::Ally, 0, 5, 10), unit(Team::Enemy, 11, 5, 10)],
        );
        assert_eq!(
            env.step(&[ACTION_WEST]),
            Err(EnvError::UnavailableAction {
                agent: 0,
                action: ACTION_WEST
            })
        );
        assert_eq!(
            env.step(&[ACTION_ATTACK_BASE]),
            Err(EnvError::UnavailableAction {
                agent: 0,
                action: ACTION_ATTACK_BASE
            })
        );
    }

    #[test]
    fn observation_visibility() {
        // alone: only slot 0 populated
        let env = staged(
            2,
            1,
            vec![
                unit(Team::Ally, 0, 0, 10),
                unit(Team::Ally, 11, 11, 10),
                unit(Team::Enemy, 11, 0, 10),
            ],
        );
        let obs = env.observe(0);
        assert!(obs.entity(0).iter().any(|&v| v != 0.0));
        assert!(obs.entity(1).iter().all(|&v| v == 0.0));
        assert!(obs.entity(2).iter().all(|&v| v == 0.0));

        // enemy exactly at view radius is visible
        let env = staged(
            1,
            1,
            vec![unit(Team::Ally, 0, 0, 10), unit(Team::Enemy, 6, 0, 10)],
        );
        let obs = env.observe(0);
        assert_eq!(obs.entity(1)[feature::ALIVE], 1.0);
        assert_eq!(obs.entity(1)[feature::DISTANCE], 1.0);
        assert_eq!(obs.entity(1)[feature::COOLDOWN], 0.0);

        // stacked units
        let env = staged(
            2,
            2,
            vec![
                unit(Team::Ally, 3, 3, 10),
                unit(Team::Ally, 3, 3, 10),
                unit(Team::Enemy, 3, 3, 10),
                unit(Team::Enemy, 3, 3, 10),
            ],
        );
        let obs = env.observe(1);
        for slot in 0..4 {
            assert_eq!(obs.entity(slot)[feature::ALIVE], 1.0);
            assert_eq!(obs.entity(slot)[feature::DISTANCE], 0.0);
        }
    }

    #[test]
    fn availability_rules() {
        let mut env = BattleEnv::new(ScenarioSpec::default()).unwrap();
        let units = vec![
            unit(Team::Ally, 0, 5, 10),
            unit(Team::Ally, 1, 5, 10),
            unit(Team::Ally, 1, 6, 10),
            unit(Team::Enemy, 2, 5, 10),
            unit(Team::Enemy, 2, 6, 10),
            unit(Team::Enemy, 2, 4, 10),
        ];
        env.set_units(units.clone()).unwrap();
        let m = env.available_actions(1);
        assert_eq!(m.iter().filter(|&&b| b).count(), 9);
        assert!(!env.available_actions(0)[ACTION_WEST]);

        let mut cooled = units;
        cooled[1].cooldown = 1;
        env.set_units(cooled).unwrap();
        assert!(env.available_actions(1)[ACTION_ATTACK_BASE..]
            .iter()
            .all(|&b| !b));
    }

    #[test]
    fn scripted_opponent_rules() {
        let env = staged(
            1,
            1,
            vec![unit(Team::Ally, 5, 5, 10), unit(Team::Enemy, 6, 5, 10)],
        );
        assert_eq!(env.scripted_action(0), ACTION_ATTACK_BASE);

        // equidistant allies: the one with smaller x is the target
        let env = staged(
            2,
            1,
            vec![
                unit(Team::Ally, 8, 2, 10),
                unit(Team::Ally, 2, 8, 10),
                unit(Team::Enemy, 5, 5, 10),
            ],
        );
        assert_eq!(env.scripted_action(0), ACTION_WEST);
        // same x: smaller y wins
        let env = staged(
            2,
            1,
            vec![
                unit(Team::Ally, 5, 9, 10),
                unit(Team::Ally, 5, 1, 10),
                unit(Team::Enemy, 5, 5, 10),
            ],
        );
        assert_eq!(env.scripted_action(0), ACTION_SOUTH);
    }

    #[test]
    fn dead_agent_only_noops_and_sees_nothing() {
        let env = staged(
            2,
            1,
            vec![
                unit(Team::Ally, 5, 5, 0),
                unit(Team::Ally, 5, 6, 10),
                unit(Team::Enemy, 6, 5, 10),
            ],
        );
        let m = env.available_actions(0);
        assert_eq!(m.iter().filter(|&&b| b).count(), 1);
        assert!(m[ACTION_NOOP]);
        assert!(env.observe(0).features.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trace_lines_are_json() {
        let mut env = BattleEnv::new(ScenarioSpec::default()).unwrap();
        env.enable_trace();
        env.reset();
        env.step(&[ACTION_STOP; 3]).unwrap();
        let mut buf = Vec::new();
        env.write_trace(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<TraceRecord> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[1].tick, 1);
        assert_eq!(lines[1].actions.len(), 6);
    }
}
