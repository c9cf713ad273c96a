//! Level-based foraging, desk scale: leveled agents collect leveled foods
//! on a grid. A food is collected when the levels of adjacent agents that
//! simultaneously choose `load` sum to at least the food level. The team
//! reward per collection is `food_level / total_food_level`, so clearing
//! the map returns exactly 1.0.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{EnvDescriptor, EnvError, EnvStep, Environment};
use crate::rng::{derive, Stream};

pub const ACT_UP: usize = 0;
pub const ACT_DOWN: usize = 1;
pub const ACT_LEFT: usize = 2;
pub const ACT_RIGHT: usize = 3;
pub const ACT_STAY: usize = 4;
pub const ACT_LOAD: usize = 5;

const MAX_LEVEL: usize = 3;
const EPISODE_LIMIT: usize = 50;

#[derive(Debug, Clone, Copy)]
pub struct ForagingConfig {
    pub size: usize,
    pub n_agents: usize,
    pub n_foods: usize,
    pub sight: usize,
}

pub(super) fn parse_scenario(name: &str, spec: &str) -> Result<ForagingConfig, EnvError> {
    let bad = |detail: String| EnvError::BadScenario {
        name: name.to_string(),
        detail,
    };
    // Format: <S>x<S>-<N>p-<F>f-s<sight>
    let parts: Vec<&str> = spec.split('-').collect();
    if parts.len() != 4 {
        return Err(bad(format!(
            "expected SxS-Np-Ff-sK, got {} parts",
            parts.len()
        )));
    }
    let dims: Vec<&str> = parts[0].split('x').collect();
    if dims.len() != 2 || dims[0] != dims[1] {
        return Err(bad("grid must be square SxS".into()));
    }
    let size: usize = dims[0].parse().map_err(|_| bad("bad grid size".into()))?;
    let n_agents: usize = parts[1]
        .strip_suffix('p')
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad agent count".into()))?;
    let n_foods: usize = parts[2]
        .strip_suffix('f')
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad food count".into()))?;
    let sight: usize = parts[3]
        .strip_prefix('s')
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("bad sight".into()))?;
    if size < 3 || n_agents == 0 || n_foods == 0 || n_agents + 5 * n_foods > size * size {
        return Err(bad("scenario does not fit the grid".into()));
    }
    Ok(ForagingConfig {
        size,
        n_agents,
        n_foods,
        sight,
    })
}

#[derive(Debug, Clone, Copy)]
struct Food {
    row: usize,
    col: usize,
    level: usize,
    alive: bool,
}

pub struct Foraging {
    desc: EnvDescriptor,
    cfg: ForagingConfig,
    agent_pos: Vec<(usize, usize)>,
    agent_level: Vec<usize>,
    foods: Vec<Food>,
    total_level: f64,
    steps: usize,
    rng: ChaCha8Rng,
    interactions: u64,
}

impl Foraging {
    pub fn new(name: &str, cfg: ForagingConfig, seed: u64) -> Self {
        let window = 2 * cfg.sight + 1;
        // Observation: own (row, col, level) plus two level channels over
        // the sight window (agents, foods).
        let obs_dim = 3 + 2 * window * window;
        let state_dim = 3 * cfg.n_agents + 4 * cfg.n_foods;
        let desc = EnvDescriptor {
            name: name.to_string(),
            n_agents: cfg.n_agents,
            obs_dim,
            state_dim,
            n_actions: 6,
            episode_limit: EPISODE_LIMIT,
            eval_interval: 50_000,
            eval_episodes: 100,
        };
        Foraging {
            desc,
            cfg,
            agent_pos: vec![(0, 0); cfg.n_agents],
            agent_level: vec![1; cfg.n_agents],
            foods: Vec::new(),
            total_level: 1.0,
            steps: 0,
            rng: derive(seed, Stream::Env, 1),
            interactions: 0,
        }
    }

    fn food_at(&self, cell: (usize, usize)) -> Option<usize> {
        self.foods
            .iter()
            .position(|f| f.alive && (f.row, f.col) == cell)
    }

    fn snapshot(&self, reward: f64, done: bool, won: bool) -> EnvStep {
        let s = self.cfg.size;
        let norm = (s - 1).max(1) as f64;
        let window = 2 * self.cfg.sight + 1;
        let mut obs = Vec::with_capacity(self.cfg.n_agents);
        for i in 0..self.cfg.n_agents {
            let (r, c) = self.agent_pos[i];
            let mut o = vec![0.0; self.desc.obs_dim];
            o[0] = r as f64 / norm;
            o[1] = c as f64 / norm;
            o[2] = self.agent_level[i] as f64 / MAX_LEVEL as f64;
            for dr in 0..window {
                for dc in 0..window {
                    let rr = r as isize + dr as isize - self.cfg.sight as isize;
                    let cc = c as isize + dc as isize - self.cfg.sight as isize;
                    if rr < 0 || cc < 0 || rr >= s as isize || cc >= s as isize {
                        continue;
                    }
                    let cell = (rr as usize, cc as usize);
                    let base = 3 + dr * window + dc;
                    if let Some(j) = self.agent_pos.iter().position(|&p| p == cell) {
                        o[base] = self.agent_level[j] as f64 / MAX_LEVEL as f64;
                    }
                    if let Some(j) = self.food_at(cell) {
                        o[3 + window * window + dr * window + dc] =
                            self.foods[j].level as f64 / MAX_LEVEL as f64;
                    }
                }
            }
            obs.push(o);
        }
        let mut state = Vec::with_capacity(self.desc.state_dim);
        for i in 0..self.cfg.n_agents {
            state.push(self.agent_pos[i].0 as f64 / norm);
            state.push(self.agent_pos[i].1 as f64 / norm);
            state.push(self.agent_level[i] as f64 / MAX_LEVEL as f64);
        }
        for f in &self.foods {
            state.push(f.row as f64 / norm);
            state.push(f.col as f64 / norm);
            state.push(f.level as f64 / MAX_LEVEL as f64);
            state.push(if f.alive { 1.0 } else { 0.0 });
        }
        EnvStep {
            obs,
            state,
            reward,
            done,
            won,
            active: vec![true; self.cfg.n_agents],
        }
    }
}

impl Environment for Foraging {
    fn descriptor(&self) -> &EnvDescriptor {
        &self.desc
    }

    fn reset(&mut self) -> EnvStep {
        let s = self.cfg.size;
        self.steps = 0;
        self.foods.clear();

        // Food cells keep Chebyshev distance >= 2 so loads are unambiguous.
        let mut cells: Vec<(usize, usize)> = (0..s)
            .flat_map(|r| (0..s).map(move |c| (r, c)))
            .collect();
        cells.shuffle(&mut self.rng);
        for &(r, c) in cells.iter() {
            if self.foods.len() == self.cfg.n_foods {
                break;
            }
            let clear = self.foods.iter().all(|f| {
                (f.row as isize - r as isize).abs().max((f.col as isize - c as isize).abs()) >= 2
            });
            if clear {
                self.foods.push(Food {
                    row: r,
                    col: c,
                    level: 1,
                    alive: true,
                });
            }
        }
        debug_assert_eq!(self.foods.len(), self.cfg.n_foods);

        // Agents on free cells.
        let mut free: Vec<(usize, usize)> = cells
            .into_iter()
            .filter(|&cell| self.food_at(cell).is_none())
            .collect();
        free.shuffle(&mut self.rng);
        for i in 0..self.cfg.n_agents {
            self.agent_pos[i] = free[i];
        }

        for l in self.agent_level.iter_mut() {
            *l = self.rng.gen_range(1..=MAX_LEVEL);
        }
        // Solvability: every food is collectable by the two strongest agents.
        let mut top = self.agent_level.clone();
        top.sort_unstable_by(|a, b| b.cmp(a));
        let cap = if top.len() >= 2 { top[0] + top[1] } else { top[0] };
        let mut total = 0usize;
        for f in self.foods.iter_mut() {
            f.level = self.rng.gen_range(1..=MAX_LEVEL).min(cap);
            total += f.level;
        }
        self.total_level = total as f64;
        self.snapshot(0.0, false, false)
    }

    fn step(&mut self, actions: &[usize]) -> EnvStep {
        debug_assert_eq!(actions.len(), self.cfg.n_agents);
        self.interactions += 1;
        self.steps += 1;
        let s = self.cfg.size as isize;

        // Movement intentions; invalid targets become stays immediately.
        let mut target: Vec<(usize, usize)> = self.agent_pos.clone();
        for i in 0..self.cfg.n_agents {
            let (r, c) = (self.agent_pos[i].0 as isize, self.agent_pos[i].1 as isize);
            let (tr, tc) = match actions[i] {
                ACT_UP => (r - 1, c),
                ACT_DOWN => (r + 1, c),
                ACT_LEFT => (r, c - 1),
                ACT_RIGHT => (r, c + 1),
                _ => (r, c),
            };
            if tr >= 0 && tc >= 0 && tr < s && tc < s {
                let cell = (tr as usize, tc as usize);
                if self.food_at(cell).is_none() {
                    target[i] = cell;
                }
            }
        }
        // Cancel conflicting moves until a fixpoint: shared targets, moves
        // onto agents that end up staying, and pairwise swaps all cancel.
        // Each sweep decides from the same snapshot so that two agents
        // contending for one cell both stay rather than one winning by
        // iteration order.
        loop {
            let mut cancel = vec![false; self.cfg.n_agents];
            for i in 0..self.cfg.n_agents {
                if target[i] == self.agent_pos[i] {
                    continue;
                }
                cancel[i] = (0..self.cfg.n_agents).any(|j| {
                    j != i
                        && (target[j] == target[i]
                            || (target[j] == self.agent_pos[i] && self.agent_pos[j] == target[i]))
                });
            }
            let mut changed = false;
            for i in 0..self.cfg.n_agents {
                if cancel[i] {
                    target[i] = self.agent_pos[i];
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        self.agent_pos = target;

        // Loading.
        let mut reward = 0.0;
        for fi in 0..self.foods.len() {
            if !self.foods[fi].alive {
                continue;
            }
            let (fr, fc) = (self.foods[fi].row as isize, self.foods[fi].col as isize);
            let mut power = 0usize;
            for i in 0..self.cfg.n_agents {
                if actions[i] != ACT_LOAD {
                    continue;
                }
                let (r, c) = (self.agent_pos[i].0 as isize, self.agent_pos[i].1 as isize);
                if (r - fr).abs() + (c - fc).abs() == 1 {
                    power += self.agent_level[i];
                }
            }
            if power >= self.foods[fi].level {
                self.foods[fi].alive = false;
                reward += self.foods[fi].level as f64 / self.total_level;
            }
        }

        let cleared = self.foods.iter().all(|f| !f.alive);
        let done = cleared || self.steps >= self.desc.episode_limit;
        self.snapshot(reward, done, done && cleared)
    }

    fn interactions(&self) -> u64 {
        self.interactions
    }
}
