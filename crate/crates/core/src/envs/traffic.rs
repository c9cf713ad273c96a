//! Traffic junction: cars stream through a two-road crossing on a square
//! grid and choose gas or brake each step. Two cars on one cell is a
//! collision (-10 each, cars keep going). Each active car also pays a time
//! cost of 0.01 times its age per step, so idling forever is not a win.
//! An episode is won when it ends with zero collisions.
//!
//! Agents are car slots: a slot is idle until a car spawns into it and
//! frees up again when that car leaves the grid. Idle slots observe zeros
//! and their actions are ignored.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{EnvDescriptor, EnvError, EnvStep, Environment};
use crate::rng::{derive, Stream};

pub const ACT_GAS: usize = 0;
pub const ACT_BRAKE: usize = 1;

const SPAWN_PROB: f64 = 0.2;
const COLLISION_PENALTY: f64 = -10.0;
const TIME_PENALTY: f64 = -0.01;
const N_ROUTES: usize = 4;

#[derive(Debug, Clone, Copy)]
pub struct JunctionConfig {
    pub size: usize,
    pub n_slots: usize,
    pub episode_limit: usize,
    /// Presence window radius; negative means the full grid is visible.
    pub sight: i32,
}

pub(super) fn parse_scenario(name: &str, sight: i32) -> Result<JunctionConfig, EnvError> {
    let spec = name.strip_prefix("tj-").unwrap_or(name);
    let (size, n_slots, episode_limit) = match spec {
        "easy" => (7, 5, 20),
        "medium" => (14, 10, 40),
        "hard" => (18, 20, 60),
        other => {
            return Err(EnvError::BadScenario {
                name: name.to_string(),
                detail: format!("unknown difficulty {other:?}, expected easy|medium|hard"),
            })
        }
    };
    Ok(JunctionConfig {
        size,
        n_slots,
        episode_limit,
        sight,
    })
}

/// Straight routes through the junction. Roads sit on the two central
/// rows/columns; each route is `size` cells long.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Route {
    East,
    West,
    South,
    North,
}

const ROUTES: [Route; N_ROUTES] = [Route::East, Route::West, Route::South, Route::North];

#[derive(Debug, Clone, Copy)]
struct Car {
    route: Route,
    pos: usize,
    age: u32,
}

pub struct TrafficJunction {
    desc: EnvDescriptor,
    cfg: JunctionConfig,
    cars: Vec<Option<Car>>,
    collisions: u64,
    steps: usize,
    rng: ChaCha8Rng,
    interactions: u64,
}

impl TrafficJunction {
    pub fn new(name: &str, cfg: JunctionConfig, seed: u64) -> Self {
        let window_cells = if cfg.sight < 0 {
            cfg.size * cfg.size
        } else {
            let w = 2 * cfg.sight as usize + 1;
            w * w
        };
        let obs_dim = 1 + N_ROUTES + 1 + window_cells;
        let state_dim = (1 + N_ROUTES + 1) * cfg.n_slots;
        let desc = EnvDescriptor {
            name: name.to_string(),
            n_agents: cfg.n_slots,
            obs_dim,
            state_dim,
            n_actions: 2,
            episode_limit: cfg.episode_limit,
            eval_interval: 10_000,
            eval_episodes: 40,
        };
        TrafficJunction {
            desc,
            cfg,
            cars: vec![None; cfg.n_slots],
            collisions: 0,
            steps: 0,
            rng: derive(seed, Stream::Env, 2),
            interactions: 0,
        }
    }

    fn lane_lo(&self) -> usize {
        self.cfg.size / 2 - 1
    }

    fn lane_hi(&self) -> usize {
        self.cfg.size / 2
    }

    fn cell_of(&self, car: &Car) -> (usize, usize) {
        let s = self.cfg.size;
        match car.route {
            Route::East => (self.lane_hi(), car.pos),
            Route::West => (self.lane_lo(), s - 1 - car.pos),
            Route::South => (car.pos, self.lane_lo()),
            Route::North => (s - 1 - car.pos, self.lane_hi()),
        }
    }

    fn entry_cell(&self, route: Route) -> (usize, usize) {
        self.cell_of(&Car {
            route,
            pos: 0,
            age: 0,
        })
    }

    fn route_onehot(route: Route) -> [f64; N_ROUTES] {
        let mut v = [0.0; N_ROUTES];
        let k = match route {
            Route::East => 0,
            Route::West => 1,
            Route::South => 2,
            Route::North => 3,
        };
        v[k] = 1.0;
        v
    }

    fn spawn(&mut self) {
        for route in ROUTES {
            if self.rng.gen::<f64>() >= SPAWN_PROB {
                continue;
            }
            let entry = self.entry_cell(route);
            let entry_taken = self
                .cars
                .iter()
                .flatten()
                .any(|c| self.cell_of(c) == entry);
            if entry_taken {
                continue;
            }
            if let Some(slot) = self.cars.iter().position(|c| c.is_none()) {
                self.cars[slot] = Some(Car {
                    route,
                    pos: 0,
                    age: 0,
                });
            }
        }
    }

    fn snapshot(&self, reward: f64, done: bool, won: bool) -> EnvStep {
        let s = self.cfg.size;
        let pos_norm = (s - 1) as f64;
        let mut occupancy = vec![0u8; s * s];
        for car in self.cars.iter().flatten() {
            let (r, c) = self.cell_of(car);
            occupancy[r * s + c] += 1;
        }

        let mut obs = Vec::with_capacity(self.cfg.n_slots);
        let mut active = Vec::with_capacity(self.cfg.n_slots);
        for slot in &self.cars {
            let mut o = vec![0.0; self.desc.obs_dim];
            match slot {
                None => active.push(false),
                Some(car) => {
                    active.push(true);
                    o[0] = 1.0;
                    o[1..1 + N_ROUTES].copy_from_slice(&Self::route_onehot(car.route));
                    o[1 + N_ROUTES] = car.pos as f64 / pos_norm;
                    let base = 2 + N_ROUTES;
                    let (r, c) = self.cell_of(car);
                    if self.cfg.sight < 0 {
                        for idx in 0..s * s {
                            let mut count = occupancy[idx] as f64;
                            if idx == r * s + c {
                                count -= 1.0;
                            }
                            if count > 0.0 {
                                o[base + idx] = 1.0;
                            }
                        }
                    } else {
                        let sight = self.cfg.sight as usize;
                        let w = 2 * sight + 1;
                        for dr in 0..w {
                            for dc in 0..w {
                                let rr = r as isize + dr as isize - sight as isize;
                                let cc = c as isize + dc as isize - sight as isize;
                                if rr < 0 || cc < 0 || rr >= s as isize || cc >= s as isize {
                                    continue;
                                }
                                let idx = rr as usize * s + cc as usize;
                                let mut count = occupancy[idx] as f64;
                                if (rr as usize, cc as usize) == (r, c) {
                                    count -= 1.0;
                                }
                                if count > 0.0 {
                                    o[base + dr * w + dc] = 1.0;
                                }
                            }
                        }
                    }
                }
            }
            obs.push(o);
        }

        let mut state = Vec::with_capacity(self.desc.state_dim);
        for slot in &self.cars {
            match slot {
                None => state.extend_from_slice(&[0.0; 2 + N_ROUTES]),
                Some(car) => {
                    state.push(1.0);
                    state.extend_from_slice(&Self::route_onehot(car.route));
                    state.push(car.pos as f64 / pos_norm);
                }
            }
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

impl Environment for TrafficJunction {
    fn descriptor(&self) -> &EnvDescriptor {
        &self.desc
    }

    fn reset(&mut self) -> EnvStep {
        self.steps = 0;
        self.collisions = 0;
        self.cars = vec![None; self.cfg.n_slots];
        self.spawn();
        self.snapshot(0.0, false, false)
    }

    fn step(&mut self, actions: &[usize]) -> EnvStep {
        debug_assert_eq!(actions.len(), self.cfg.n_slots);
        self.interactions += 1;
        self.steps += 1;
        let route_len = self.cfg.size;

        // Move, retiring cars that drive off the far end.
        for (slot, action) in self.cars.iter_mut().zip(actions) {
            if let Some(car) = slot {
                if *action == ACT_GAS {
                    car.pos += 1;
                    if car.pos >= route_len {
                        *slot = None;
                    }
                }
            }
        }

        // Collisions: every car on a shared cell pays the penalty.
        let mut reward = 0.0;
        let s = self.cfg.size;
        let mut occupancy = vec![0u8; s * s];
        for car in self.cars.iter().flatten() {
            let (r, c) = self.cell_of(car);
            occupancy[r * s + c] += 1;
        }
        for car in self.cars.iter().flatten() {
            let (r, c) = self.cell_of(car);
            if occupancy[r * s + c] >= 2 {
                reward += COLLISION_PENALTY;
                self.collisions += 1;
            }
        }

        // Time cost scales with how long each car has been on the road.
        for car in self.cars.iter_mut().flatten() {
            car.age += 1;
            reward += TIME_PENALTY * car.age as f64;
        }

        self.spawn();

        let done = self.steps >= self.cfg.episode_limit;
        let won = done && self.collisions == 0;
        self.snapshot(reward, done, won)
    }

    fn interactions(&self) -> u64 {
        self.interactions
    }
}
