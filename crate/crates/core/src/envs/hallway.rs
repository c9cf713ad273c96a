//! Hallway: each agent walks a private corridor toward a shared goal cell
//! and the team is paid only for simultaneous arrival, which is impossible
//! to coordinate reliably without communication.
//!
//! Single-group scenario (`hallway-4x6x10`): reward +1 and success when all
//! agents reach the goal on the same step; any strict subset arriving ends
//! the episode with 0. Grouped scenario (`hallway-3x5-4x6x10`): +1 per
//! group arriving together, -0.5 when both groups arrive on the same step,
//! success iff the episode return equals the number of groups.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{EnvDescriptor, EnvError, EnvStep, Environment};
use crate::rng::{derive, Stream};

const ACT_LEFT: usize = 0;
const ACT_STAY: usize = 1;
const ACT_RIGHT: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GroupState {
    Alive,
    Succeeded,
    Failed,
}

pub struct Hallway {
    desc: EnvDescriptor,
    /// Corridor length per agent, group-major.
    lengths: Vec<usize>,
    /// Group index per agent.
    group_of: Vec<usize>,
    n_groups: usize,
    positions: Vec<usize>,
    group_state: Vec<GroupState>,
    steps: usize,
    episode_return: f64,
    rng: ChaCha8Rng,
    interactions: u64,
}

/// Parses `4x6x10` or `3x5-4x6x10` into per-group corridor lengths.
pub(super) fn parse_groups(name: &str, spec: &str) -> Result<Vec<Vec<usize>>, EnvError> {
    let bad = |detail: &str| EnvError::BadScenario {
        name: name.to_string(),
        detail: detail.to_string(),
    };
    let mut groups = Vec::new();
    for part in spec.split('-') {
        let lens: Vec<usize> = part
            .split('x')
            .map(|s| s.parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad("corridor lengths must be integers"))?;
        if lens.is_empty() || lens.iter().any(|&l| l == 0) {
            return Err(bad("corridor lengths must be positive"));
        }
        groups.push(lens);
    }
    if groups.is_empty() {
        return Err(bad("no groups"));
    }
    Ok(groups)
}

impl Hallway {
    pub fn new(name: &str, groups: Vec<Vec<usize>>, seed: u64) -> Self {
        let lengths: Vec<usize> = groups.iter().flatten().copied().collect();
        let group_of: Vec<usize> = groups
            .iter()
            .enumerate()
            .flat_map(|(gi, g)| std::iter::repeat(gi).take(g.len()))
            .collect();
        let n_groups = groups.len();
        let max_len = lengths.iter().copied().max().unwrap();
        let n_agents = lengths.len();
        let desc = EnvDescriptor {
            name: name.to_string(),
            n_agents,
            obs_dim: max_len,
            state_dim: lengths.iter().sum(),
            n_actions: 3,
            episode_limit: if n_groups == 1 { 15 } else { 25 },
            eval_interval: 10_000,
            eval_episodes: 100,
        };
        Hallway {
            desc,
            lengths,
            group_of,
            n_groups,

            positions: vec![0; n_agents],
            group_state: vec![GroupState::Alive; n_groups],
            steps: 0,
            episode_return: 0.0,
            rng: derive(seed, Stream::Env, 0),
            interactions: 0,
        }
    }

    fn agent_active(&self, i: usize) -> bool {
        self.group_state[self.group_of[i]] == GroupState::Alive
    }

    fn snapshot(&self, reward: f64, done: bool, won: bool) -> EnvStep {
        let n = self.desc.n_agents;
        let mut obs = vec![vec![0.0; self.desc.obs_dim]; n];
        let mut active = vec![false; n];
        for i in 0..n {
            active[i] = self.agent_active(i);
            // One-hot over corridor cells 1..=L, all-zero at the goal.
            if active[i] && self.positions[i] > 0 {
                obs[i][self.positions[i] - 1] = 1.0;
            }
        }
        let mut state = Vec::with_capacity(self.desc.state_dim);
        for i in 0..n {
            let mut block = vec![0.0; self.lengths[i]];
            if self.positions[i] > 0 {
                block[self.positions[i] - 1] = 1.0;
            }
            state.extend_from_slice(&block);
        }
        EnvStep {
            obs,
            state,
            reward,
            done,
            won,
            active,
        }
    }
}

impl Environment for Hallway {
    fn descriptor(&self) -> &EnvDescriptor {
        &self.desc
    }

    fn reset(&mut self) -> EnvStep {
        for (p, &l) in self.positions.iter_mut().zip(&self.lengths) {
            *p = self.rng.gen_range(1..=l);
        }
        self.group_state.fill(GroupState::Alive);
        self.steps = 0;
        self.episode_return = 0.0;
        self.snapshot(0.0, false, false)
    }

    fn step(&mut self, actions: &[usize]) -> EnvStep {
        debug_assert_eq!(actions.len(), self.desc.n_agents);
        self.interactions += 1;
        self.steps += 1;
        for i in 0..self.desc.n_agents {
            if !self.agent_active(i) {
                continue;
            }
            match actions[i] {
                ACT_LEFT => self.positions[i] = self.positions[i].saturating_sub(1),
                ACT_RIGHT => self.positions[i] = (self.positions[i] + 1).min(self.lengths[i]),
                _ => debug_assert_eq!(actions[i], ACT_STAY),
            }
        }

        let mut successes = 0;
        for g in 0..self.n_groups {
            if self.group_state[g] != GroupState::Alive {
                continue;
            }
            let members: Vec<usize> = (0..self.desc.n_agents)
                .filter(|&i| self.group_of[i] == g)
                .collect();
            let arrived = members.iter().filter(|&&i| self.positions[i] == 0).count();
            if arrived == members.len() {
                self.group_state[g] = GroupState::Succeeded;
                successes += 1;
            } else if arrived > 0 {
                self.group_state[g] = GroupState::Failed;
            }
        }
        let mut reward = successes as f64;
        if successes == self.n_groups && self.n_groups > 1 {
            reward -= 0.5;
        }
        self.episode_return += reward;

        let all_done = self
            .group_state
            .iter()
            .all(|&s| s != GroupState::Alive);
        let done = all_done || self.steps >= self.desc.episode_limit;
        let won = done && (self.episode_return - self.n_groups as f64).abs() < 1e-9;
        self.snapshot(reward, done, won)
    }

    fn interactions(&self) -> u64 {
        self.interactions
    }
}
