//! Offline dataset persistence and validation.
//!
//! File layout: one header JSON line, then one JSON line per episode of
//! the form `{"steps":[{"s":[...],"r":x,"agents":[{"o":[...],"a":k,
//! "done":b,"recv":[ids]}...]}...]}`. An agent row's `done` marks an
//! inactive slot; `recv` lists the other active slots the agent's message
//! reached that step. Serialization is deterministic, so write -> read ->
//! write reproduces a file byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::envs::episode_won;
use crate::qlearn::EpisodeRecord;
use crate::train::{Result, TrainError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    /// Full registry key, e.g. `hallway-4x6x10`.
    pub env: String,
    /// Scenario part of the key, e.g. `4x6x10`.
    pub scenario: String,
    pub n_agents: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub n_actions: usize,
    /// `expert`, `noisy`, `replay-poor`, `replay-medium`, `replay-good`.
    pub scheme: String,
    /// Source proportions; must sum to 1. Replay schemes list quality
    /// buckets, expert/noisy list themselves.
    pub mixture: BTreeMap<String, f64>,
    pub generator_seed: u64,
    pub episodes: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<EpisodeRecord>,
}

#[derive(Serialize, Deserialize)]
struct AgentJson {
    o: Vec<f64>,
    a: usize,
    done: bool,
    recv: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct StepJson {
    s: Vec<f64>,
    r: f64,
    agents: Vec<AgentJson>,
}

#[derive(Serialize, Deserialize)]
struct EpisodeJson {
    steps: Vec<StepJson>,
}

/// Receivers of agent `i`'s message: every other active slot, or nobody
/// when the sender itself is inactive.
pub fn recv_ids(active: &[bool], i: usize) -> Vec<usize> {
    if !active[i] {
        return Vec::new();
    }
    active
        .iter()
        .enumerate()
        .filter(|&(j, &a)| a && j != i)
        .map(|(j, _)| j)
        .collect()
}

fn episode_to_json(e: &EpisodeRecord, n: usize, od: usize) -> EpisodeJson {
    EpisodeJson {
        steps: (0..e.len())
            .map(|t| StepJson {
                s: e.states[t].clone(),
                r: e.rewards[t],
                agents: (0..n)
                    .map(|i| AgentJson {
                        o: e.obs[t][i * od..(i + 1) * od].to_vec(),
                        a: e.actions[t][i],
                        done: !e.active[t][i],
                        recv: recv_ids(&e.active[t], i),
                    })
                    .collect(),
            })
            .collect(),
    }
}

fn episode_from_json(j: &EpisodeJson, env: &str, index: usize) -> Result<EpisodeRecord> {
    let mut e = EpisodeRecord {
        obs: Vec::with_capacity(j.steps.len()),
        states: Vec::with_capacity(j.steps.len()),
        actions: Vec::with_capacity(j.steps.len()),
        rewards: Vec::with_capacity(j.steps.len()),
        active: Vec::with_capacity(j.steps.len()),
        won: false,
    };
    for (t, step) in j.steps.iter().enumerate() {
        let mut obs = Vec::new();
        let mut actions = Vec::with_capacity(step.agents.len());
        let active: Vec<bool> = step.agents.iter().map(|a| !a.done).collect();
        for (i, a) in step.agents.iter().enumerate() {
            obs.extend_from_slice(&a.o);
            actions.push(a.a);
            if a.recv != recv_ids(&active, i) {
                return Err(TrainError::Invalid(format!(
                    "episode {index} step {t}: recv list of agent {i} \
                     inconsistent with the step's done flags"
                )));
            }
        }
        e.obs.push(obs);
        e.states.push(step.s.clone());
        e.actions.push(actions);
        e.rewards.push(step.r);
        e.active.push(active);
    }
    e.won = episode_won(env, &e.rewards);
    Ok(e)
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut w, &ds.header)?;
    w.write_all(b"\n")?;
    for e in &ds.episodes {
        let j = episode_to_json(e, ds.header.n_agents, ds.header.obs_dim);
        serde_json::to_writer(&mut w, &j)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header_line = lines
        .next()
        .ok_or_else(|| TrainError::Invalid(format!("{}: empty dataset file", path.display())))?;
    let header: DatasetHeader = serde_json::from_str(header_line)?;
    let mut episodes = Vec::with_capacity(header.episodes);
    for (k, line) in lines.enumerate() {
        let j: EpisodeJson = serde_json::from_str(line)?;
        episodes.push(episode_from_json(&j, &header.env, k)?);
    }
    Ok(Dataset { header, episodes })
}

/// Facts a validation pass establishes about a dataset.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub episodes: usize,
    pub steps: usize,
    pub mean_return: f64,
    pub win_rate: f64,
}

/// Checks the internal invariants: header counts and dimensions match the
/// body, action ids are in range, the mixture sums to one, and each
/// `recv` list is consistent with the `done` flags of its step.
/// Environment-facing dimension checks happen where an environment is in
/// hand (offline training), since observation widths can depend on
/// run-time settings such as sight.
pub fn validate(ds: &Dataset) -> Result<ValidationReport> {
    let h = &ds.header;
    let fail = |msg: String| TrainError::Invalid(msg);

    if h.episodes != ds.episodes.len() {
        return Err(fail(format!(
            "header claims {} episodes, file has {}",
            h.episodes,
            ds.episodes.len()
        )));
    }
    let mix_sum: f64 = h.mixture.values().sum();
    if (mix_sum - 1.0).abs() > 1e-9 {
        return Err(fail(format!("mixture weights sum to {mix_sum}, not 1")));
    }
    if h.mixture.values().any(|&w| w < 0.0) {
        return Err(fail("negative mixture weight".into()));
    }

    let mut steps = 0usize;
    let mut ret_sum = 0.0;
    let mut wins = 0usize;
    for (k, e) in ds.episodes.iter().enumerate() {
        if e.is_empty() {
            return Err(fail(format!("episode {k} has no steps")));
        }
        for t in 0..e.len() {
            if e.obs[t].len() != h.n_agents * h.obs_dim {
                return Err(fail(format!(
                    "episode {k} step {t}: obs width {} != n_agents*obs_dim {}",
                    e.obs[t].len(),
                    h.n_agents * h.obs_dim
                )));
            }
            if e.states[t].len() != h.state_dim {
                return Err(fail(format!("episode {k} step {t}: bad state width")));
            }
            if e.actions[t].len() != h.n_agents || e.active[t].len() != h.n_agents {
                return Err(fail(format!("episode {k} step {t}: bad agent count")));
            }
            if e.actions[t].iter().any(|&a| a >= h.n_actions) {
                return Err(fail(format!("episode {k} step {t}: action out of range")));
            }
        }
        steps += e.len();
        ret_sum += e.ret();
        if e.won {
            wins += 1;
        }
    }
    Ok(ValidationReport {
        episodes: ds.episodes.len(),
        steps,
        mean_return: ret_sum / ds.episodes.len().max(1) as f64,
        win_rate: wins as f64 / ds.episodes.len().max(1) as f64,
    })
}

/// Validates a file on disk, including that the episode lines parse and
/// round-trip byte-identically (schema exactness).
pub fn validate_file(path: &Path) -> Result<ValidationReport> {
    let ds = read_dataset(path)?;
    let report = validate(&ds)?;

    let original = fs::read_to_string(path)?;
    let tmp = path.with_extension("roundtrip.tmp");
    write_dataset(&tmp, &ds)?;
    let rewritten = fs::read_to_string(&tmp)?;
    fs::remove_file(&tmp)?;
    if original != rewritten {
        return Err(TrainError::Invalid(format!(
            "{}: file does not round-trip byte-identically",
            path.display()
        )));
    }
    Ok(report)
}
