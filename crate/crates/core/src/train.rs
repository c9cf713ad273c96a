//! Online training: epsilon-greedy collection into a FIFO episode replay,
//! one gradient step per collected episode, periodic greedy evaluation,
//! and run artifacts (resolved config, metrics, checkpoints).
//!
//! Every random draw comes from a stream derived from the run seed, so a
//! run is bit-reproducible from its config alone.

use std::collections::VecDeque;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{RunConfig, TrainConfig};
use crate::diffcore::{load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::diffcore::DiffError;
use crate::envs::{make_env, EnvError, Environment};
use crate::qlearn::{combined_update, make_adam, EpisodeBatch, EpisodeRecord, Model, UpdateStats};
use crate::rng::{derive, Stream};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// FIFO episode replay; sampling is without replacement.
pub struct Replay {
    cap: usize,
    eps: VecDeque<EpisodeRecord>,
}

impl Replay {
    pub fn new(cap: usize) -> Self {
        Replay {
            cap,
            eps: VecDeque::new(),
        }
    }

    pub fn push(&mut self, e: EpisodeRecord) {
        if self.eps.len() == self.cap {
            self.eps.pop_front();
        }
        self.eps.push_back(e);
    }

    pub fn len(&self) -> usize {
        self.eps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eps.is_empty()
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng, k: usize) -> Vec<&EpisodeRecord> {
        rand::seq::index::sample(rng, self.eps.len(), k)
            .iter()
            .map(|i| &self.eps[i])
            .collect()
    }
}

/// Linear anneal from `eps_start` to `eps_end` over `eps_anneal_steps`.
pub fn epsilon(cfg: &TrainConfig, env_step: u64) -> f64 {
    if cfg.eps_anneal_steps == 0 || env_step >= cfg.eps_anneal_steps {
        return cfg.eps_end;
    }
    let frac = env_step as f64 / cfg.eps_anneal_steps as f64;
    cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frac
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

/// Collects one episode. Each agent independently explores with
/// probability `eps`, otherwise acts greedily on its own values.
pub fn rollout_episode(
    model: &Model,
    env: &mut dyn Environment,
    rng: &mut ChaCha8Rng,
    eps: f64,
) -> Result<EpisodeRecord> {
    let n = model.desc.n_agents;
    let na = model.desc.n_actions;
    let mut h = model.reset_hidden();
    let mut cur = env.reset();
    let mut rec = EpisodeRecord {
        obs: Vec::new(),
        states: Vec::new(),
        actions: Vec::new(),
        rewards: Vec::new(),
        active: Vec::new(),
        won: false,
    };
    loop {
        let obs_flat: Vec<f64> = cur.obs.iter().flatten().copied().collect();
        let q = model.q_values(&obs_flat, &mut h)?;
        let acts: Vec<usize> = (0..n)
            .map(|i| {
                if eps > 0.0 && rng.gen::<f64>() < eps {
                    rng.gen_range(0..na)
                } else {
                    argmax(&q[i * na..(i + 1) * na])
                }
            })
            .collect();
        rec.obs.push(obs_flat);
        rec.states.push(cur.state.clone());
        rec.active.push(cur.active.clone());
        rec.actions.push(acts.clone());
        let next = env.step(&acts);
        rec.rewards.push(next.reward);
        if next.done {
            rec.won = next.won;
            return Ok(rec);
        }
        cur = next;
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalResult {
    pub win_rate: f64,
    pub mean_return: f64,
}

/// Greedy evaluation on a fresh environment seeded from the evaluation
/// stream, so evaluation never perturbs the training trajectory and a
/// given (seed, ordinal) is reproducible in isolation.
pub fn evaluate(
    model: &Model,
    env_name: &str,
    sight: i32,
    seed: u64,
    ordinal: u64,
    episodes: usize,
) -> Result<EvalResult> {
    let env_seed: u64 = derive(seed, Stream::Eval, ordinal).gen();
    let mut env = make_env(env_name, env_seed, sight)?;
    let n = model.desc.n_agents;
    let na = model.desc.n_actions;
    let mut wins = 0usize;
    let mut ret_sum = 0.0;
    for _ in 0..episodes {
        let mut h = model.reset_hidden();
        let mut cur = env.reset();
        loop {
            let obs_flat: Vec<f64> = cur.obs.iter().flatten().copied().collect();
            let q = model.q_values(&obs_flat, &mut h)?;
            let acts: Vec<usize> = (0..n).map(|i| argmax(&q[i * na..(i + 1) * na])).collect();
            let next = env.step(&acts);
            ret_sum += next.reward;
            if next.done {
                if next.won {
                    wins += 1;
                }
                break;
            }
            cur = next;
        }
    }
    Ok(EvalResult {
        win_rate: wins as f64 / episodes as f64,
        mean_return: ret_sum / episodes as f64,
    })
}

/// One line of `metrics.jsonl`, written at every evaluation. Loss fields
/// hold the mean over the gradient steps since the previous evaluation
/// (0 when none ran, or for losses the algorithm does not use).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub env_step: u64,
    pub test_win_rate: f64,
    pub mean_return: f64,
    #[serde(rename = "L_rl")]
    pub l_rl: f64,
    #[serde(rename = "L_ae")]
    pub l_ae: f64,
    #[serde(rename = "L_m")]
    pub l_m: f64,
    pub epsilon: f64,
    pub seed: u64,
}

/// One line of `checkpoints.jsonl`, the index of the numbered checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointRow {
    pub ordinal: u64,
    pub env_step: u64,
    pub win_rate: f64,
    pub mean_return: f64,
    pub path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub env: String,
    pub seed: u64,
    pub env_steps: u64,
    pub evals: usize,
    pub last_win_rate: f64,
    /// Mean win rate over the final three evaluations (fewer if the run
    /// had fewer), the statistic reported for a run.
    pub final_win_rate: f64,
    pub stopped_early: bool,
    pub wall_seconds: f64,
}

/// Rebuilds a model from a run directory: reads the resolved
/// `config.json`, constructs the networks, and restores the named
/// checkpoint file into them (online and target groups).
pub fn load_run_model(run_dir: &Path, ckpt_name: &str) -> Result<Model> {
    let cfg: RunConfig =
        serde_json::from_str(&fs::read_to_string(run_dir.join("config.json"))?)?;
    let env = make_env(&cfg.env, 0, cfg.sight)?;
    let desc = env.descriptor().clone();
    let model = Model::new(cfg, desc);
    let ckpt = load_checkpoint(&run_dir.join(ckpt_name))?;
    ckpt.restore(&model.all_groups())?;
    Ok(model)
}

#[derive(Default)]
pub(crate) struct LossAccum {
    l_rl: f64,
    l_ae: f64,
    l_m: f64,
    count: u64,
}

impl LossAccum {
    pub(crate) fn push(&mut self, s: &UpdateStats) {
        self.l_rl += s.l_rl;
        self.l_ae += s.l_ae;
        self.l_m += s.l_m;
        self.count += 1;
    }

    pub(crate) fn drain(&mut self) -> (f64, f64, f64) {
        let out = if self.count == 0 {
            (0.0, 0.0, 0.0)
        } else {
            let c = self.count as f64;
            (self.l_rl / c, self.l_ae / c, self.l_m / c)
        };
        *self = LossAccum::default();
        out
    }
}

/// Runs the full online loop and writes all artifacts into `out_dir`.
///
/// A `.incomplete` marker exists while the run is in flight so interrupted
/// output directories are recognizable.
pub fn train_online(cfg: &RunConfig, out_dir: &Path, verbose: bool) -> Result<RunSummary> {
    let start = Instant::now();
    fs::create_dir_all(out_dir)?;
    let marker = out_dir.join(".incomplete");
    fs::write(&marker, b"")?;
    fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(cfg)?,
    )?;

    let mut env = make_env(&cfg.env, cfg.seed, cfg.sight)?;
    let desc = env.descriptor().clone();
    let eval_interval = if cfg.train.eval_interval > 0 {
        cfg.train.eval_interval
    } else {
        desc.eval_interval
    };
    let eval_episodes = if cfg.train.eval_episodes > 0 {
        cfg.train.eval_episodes
    } else {
        desc.eval_episodes
    };

    let model = Model::new(cfg.clone(), desc);
    let mut opt = make_adam(&cfg.optim);
    let mut replay = Replay::new(cfg.train.buffer_episodes);
    let mut explore_rng = derive(cfg.seed, Stream::Explore, 0);
    let mut sampler_rng = derive(cfg.seed, Stream::Sampler, 0);

    let mut metrics = BufWriter::new(fs::File::create(out_dir.join("metrics.jsonl"))?);
    let mut ckpt_index: Option<BufWriter<fs::File>> = None;

    let mut env_step: u64 = 0;
    let mut next_eval: u64 = 0;
    let mut ordinal: u64 = 0;
    let mut losses = LossAccum::default();
    let mut recent_wins: VecDeque<f64> = VecDeque::new();
    let mut consec_good: u32 = 0;
    let mut stopped_early = false;

    'outer: loop {
        while next_eval <= env_step {
            let at_step = next_eval;
            let r = evaluate(&model, &cfg.env, cfg.sight, cfg.seed, ordinal, eval_episodes)?;
            let (l_rl, l_ae, l_m) = losses.drain();
            let row = MetricsRow {
                env_step: at_step,
                test_win_rate: r.win_rate,
                mean_return: r.mean_return,
                l_rl,
                l_ae,
                l_m,
                epsilon: epsilon(&cfg.train, env_step),
                seed: cfg.seed,
            };
            serde_json::to_writer(&mut metrics, &row)?;
            metrics.write_all(b"\n")?;
            metrics.flush()?;
            if verbose {
                println!(
                    "step {:>9}  win {:.3}  return {:+.3}  L_rl {:.5}  L_ae {:.5}  L_m {:.5}",
                    at_step, r.win_rate, r.mean_return, l_rl, l_ae, l_m
                );
            }
            recent_wins.push_back(r.win_rate);
            if recent_wins.len() > 3 {
                recent_wins.pop_front();
            }

            if cfg.train.checkpoint_every_evals > 0
                && ordinal % cfg.train.checkpoint_every_evals as u64 == 0
            {
                let name = format!("ckpt_{ordinal:05}.ckpt");
                save_checkpoint(
                    &out_dir.join(&name),
                    CheckpointMeta {
                        step: env_step,
                        seed: cfg.seed,
                    },
                    &model.all_groups(),
                )?;
                if ckpt_index.is_none() {
                    ckpt_index = Some(BufWriter::new(fs::File::create(
                        out_dir.join("checkpoints.jsonl"),
                    )?));
                }
                let index = ckpt_index.as_mut().expect("created above");
                let row = CheckpointRow {
                    ordinal,
                    env_step,
                    win_rate: r.win_rate,
                    mean_return: r.mean_return,
                    path: name,
                };
                serde_json::to_writer(&mut *index, &row)?;
                index.write_all(b"\n")?;
                index.flush()?;
            }

            ordinal += 1;
            next_eval += eval_interval;

            if cfg.train.stop_when_win_rate > 0.0 {
                if r.win_rate >= cfg.train.stop_when_win_rate {
                    consec_good += 1;
                    if consec_good >= cfg.train.stop_consecutive_evals.max(1) {
                        stopped_early = true;
                        break 'outer;
                    }
                } else {
                    consec_good = 0;
                }
            }
        }
        if env_step >= cfg.steps {
            break;
        }

        let eps = epsilon(&cfg.train, env_step);
        let episode = rollout_episode(&model, env.as_mut(), &mut explore_rng, eps)?;
        env_step += episode.len() as u64;
        replay.push(episode);

        if replay.len() >= cfg.train.batch {
            let sampled = replay.sample(&mut sampler_rng, cfg.train.batch);
            let batch = EpisodeBatch::build(&sampled, &model.desc);
            let stats = combined_update(&model, &mut opt, &batch, env_step)?;
            losses.push(&stats);
        }
    }

    save_checkpoint(
        &out_dir.join("final.ckpt"),
        CheckpointMeta {
            step: env_step,
            seed: cfg.seed,
        },
        &model.all_groups(),
    )?;

    let last = recent_wins.back().copied().unwrap_or(0.0);
    let final_win = if recent_wins.is_empty() {
        0.0
    } else {
        recent_wins.iter().sum::<f64>() / recent_wins.len() as f64
    };
    let summary = RunSummary {
        env: cfg.env.clone(),
        seed: cfg.seed,
        env_steps: env_step,
        evals: ordinal as usize,
        last_win_rate: last,
        final_win_rate: final_win,
        stopped_early,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    fs::remove_file(&marker)?;
    Ok(summary)
}

/// Reads a metrics file back, skipping blank lines.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(line)?);
    }
    Ok(rows)
}

pub fn read_checkpoint_index(path: &Path) -> Result<Vec<CheckpointRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(line)?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Algo;

    #[test]
    fn epsilon_anneals_linearly_and_clamps() {
        let cfg = TrainConfig::default();
        assert_eq!(epsilon(&cfg, 0), 1.0);
        let mid = epsilon(&cfg, 25_000);
        assert!((mid - 0.525).abs() < 1e-12);
        assert_eq!(epsilon(&cfg, 50_000), 0.05);
        assert_eq!(epsilon(&cfg, 1_000_000), 0.05);
    }

    #[test]
    fn replay_is_fifo_and_sampling_is_deterministic() {
        let mk = |tag: f64| EpisodeRecord {
            obs: vec![vec![tag]],
            states: vec![vec![tag]],
            actions: vec![vec![0]],
            rewards: vec![tag],
            active: vec![vec![true]],
            won: false,
        };
        let mut r = Replay::new(3);
        for i in 0..5 {
            r.push(mk(i as f64));
        }
        assert_eq!(r.len(), 3);
        // Oldest two evicted.
        let all = r.sample(&mut derive(0, Stream::Sampler, 0), 3);
        let mut tags: Vec<f64> = all.iter().map(|e| e.rewards[0]).collect();
        tags.sort_by(f64::total_cmp);
        assert_eq!(tags, vec![2.0, 3.0, 4.0]);

        let a: Vec<f64> = r
            .sample(&mut derive(1, Stream::Sampler, 0), 2)
            .iter()
            .map(|e| e.rewards[0])
            .collect();
        let b: Vec<f64> = r
            .sample(&mut derive(1, Stream::Sampler, 0), 2)
            .iter()
            .map(|e| e.rewards[0])
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn rollout_records_aligned_fields() {
        let mut cfg = RunConfig::default();
        cfg.env = "hallway-3x4".into();
        cfg.algo = Algo::Nocomm;
        let mut env = make_env(&cfg.env, 7, cfg.sight).unwrap();
        let model = Model::new(cfg, env.descriptor().clone());
        let mut rng = derive(7, Stream::Explore, 0);
        let ep = rollout_episode(&model, env.as_mut(), &mut rng, 1.0).unwrap();
        assert!(!ep.is_empty());
        assert_eq!(ep.obs.len(), ep.len());
        assert_eq!(ep.states.len(), ep.len());
        assert_eq!(ep.actions.len(), ep.len());
        assert_eq!(ep.active.len(), ep.len());
        assert!(ep.len() <= env.descriptor().episode_limit);
    }

    #[test]
    fn short_training_run_writes_artifacts_and_reproduces() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.env = "hallway-3x4".into();
        cfg.algo = Algo::Nocomm;
        cfg.steps = 400;
        cfg.train.batch = 4;
        cfg.train.buffer_episodes = 64;
        cfg.train.eval_interval = 200;
        cfg.train.eval_episodes = 8;

        let s1 = train_online(&cfg, &dir.path().join("a"), false).unwrap();
        let s2 = train_online(&cfg, &dir.path().join("b"), false).unwrap();
        assert_eq!(s1.env_steps, s2.env_steps);

        let m1 = read_metrics(&dir.path().join("a/metrics.jsonl")).unwrap();
        let m2 = read_metrics(&dir.path().join("b/metrics.jsonl")).unwrap();
        assert!(!m1.is_empty());
        assert_eq!(m1.len(), m2.len());
        for (a, b) in m1.iter().zip(&m2) {
            assert_eq!(a.env_step, b.env_step);
            assert_eq!(a.test_win_rate, b.test_win_rate);
            assert_eq!(a.l_rl, b.l_rl);
        }
        // Boundary evals at 0, 200, 400.
        assert_eq!(m1.first().unwrap().env_step, 0);
        assert!(s1.env_steps >= 400);
        assert!(dir.path().join("a/final.ckpt").exists());
        assert!(dir.path().join("a/summary.json").exists());
        assert!(!dir.path().join("a/.incomplete").exists());

        let raw = fs::read_to_string(dir.path().join("a/metrics.jsonl")).unwrap();
        let first: serde_json::Value = serde_json::from_str(raw.lines().next().unwrap()).unwrap();
        for key in [
            "env_step",
            "test_win_rate",
            "mean_return",
            "L_rl",
            "L_ae",
            "L_m",
            "epsilon",
            "seed",
        ] {
            assert!(first.get(key).is_some(), "missing metrics key {key}");
        }
    }
}
