//! Dataset collection: greedy expert rollouts, epsilon-perturbed noisy
//! rollouts, and quality-bucketed replay mixtures drawn from a checkpoint
//! library.
//!
//! Buckets classify POLICIES by their evaluation mean return recorded in
//! the library index; episodes sampled from a bucketed policy keep their
//! natural return spread. Replay datasets store episodes grouped by
//! bucket in good, medium, poor order so per-episode provenance is
//! recoverable from the header mixture and the deterministic rounding.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;

use crate::config::RunConfig;
use crate::envs::make_env;
use crate::qlearn::{EpisodeRecord, Model};
use crate::rng::{derive, Stream};
use crate::train::{rollout_episode, CheckpointRow, Result, TrainError};

use super::dataset::{Dataset, DatasetHeader};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Bucket {
    Good,
    Medium,
    Poor,
}

impl Bucket {
    pub fn name(self) -> &'static str {
        match self {
            Bucket::Good => "good",
            Bucket::Medium => "medium",
            Bucket::Poor => "poor",
        }
    }
}

/// Evaluation mean-return ranges `[(good), (medium), (poor)]` for an
/// environment, each as `(lo, hi)`.
///
/// Corridor and foraging tasks scale with the maximum achievable return
/// `G` (the number of agent groups, or 1): good `[0.75G, G]`, medium
/// `[0.5G, 0.75G)`, poor `[0, 0.5G)`. Traffic uses fixed penalty bands.
pub fn bucket_ranges(env_name: &str) -> Result<[(f64, f64); 3]> {
    if env_name.starts_with("hallway-") {
        let g = env_name.matches('-').count() as f64;
        Ok([(0.75 * g, g), (0.5 * g, 0.75 * g), (0.0, 0.5 * g)])
    } else if env_name.starts_with("lbf-") {
        Ok([(0.75, 1.0), (0.5, 0.75), (0.0, 0.5)])
    } else if env_name.starts_with("tj-") {
        Ok([(-7.0, 0.0), (-17.0, -7.0), (-600.0, -17.0)])
    } else {
        Err(TrainError::Invalid(format!(
            "no quality buckets defined for `{env_name}`"
        )))
    }
}

/// Classifies an evaluation mean return; boundary values belong to the
/// better bucket. Returns `None` below the poor range.
pub fn bucket_of(env_name: &str, mean_return: f64) -> Result<Option<Bucket>> {
    let [(g_lo, g_hi), (m_lo, _), (p_lo, _)] = bucket_ranges(env_name)?;
    Ok(if mean_return >= g_lo && mean_return <= g_hi + 1e-9 {
        Some(Bucket::Good)
    } else if mean_return >= m_lo {
        Some(Bucket::Medium)
    } else if mean_return >= p_lo - 1e-9 {
        Some(Bucket::Poor)
    } else {
        None
    })
}

/// Splits `total` into integer counts proportional to `weights` using
/// largest-remainder rounding; ties go to the earlier entry.
pub fn largest_remainder(weights: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = weights.iter().map(|w| w * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).expect("finite weights")
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Bucket weights of a replay scheme in good, medium, poor order.
pub fn replay_mixture(scheme: &str) -> Result<[f64; 3]> {
    match scheme {
        "replay-good" => Ok([0.6, 0.2, 0.2]),
        "replay-medium" => Ok([0.0, 0.8, 0.2]),
        "replay-poor" => Ok([0.0, 0.0, 1.0]),
        other => Err(TrainError::Invalid(format!(
            "unknown replay scheme `{other}` (expected replay-good|replay-medium|replay-poor)"
        ))),
    }
}

fn header_for(
    cfg: &RunConfig,
    scheme: &str,
    mixture: BTreeMap<String, f64>,
    seed: u64,
    episodes: usize,
) -> Result<DatasetHeader> {
    let env = make_env(&cfg.env, 0, cfg.sight)?;
    let d = env.descriptor();
    let scenario = cfg
        .env
        .split_once('-')
        .map(|(_, s)| s.to_string())
        .unwrap_or_default();
    Ok(DatasetHeader {
        env: cfg.env.clone(),
        scenario,
        n_agents: d.n_agents,
        obs_dim: d.obs_dim,
        state_dim: d.state_dim,
        n_actions: d.n_actions,
        scheme: scheme.to_string(),
        mixture,
        generator_seed: seed,
        episodes,
    })
}

fn rollout_many(
    model: &Model,
    cfg: &RunConfig,
    eps: f64,
    n_episodes: usize,
    seed: u64,
    env_ordinal: u64,
) -> Result<Vec<EpisodeRecord>> {
    let env_seed: u64 = derive(seed, Stream::Collect, env_ordinal).gen();
    let mut env = make_env(&cfg.env, env_seed, cfg.sight)?;
    let mut act_rng = derive(seed, Stream::Collect, env_ordinal + 1);
    (0..n_episodes)
        .map(|_| rollout_episode(model, env.as_mut(), &mut act_rng, eps))
        .collect()
}

/// Greedy rollouts from a trained policy.
pub fn collect_expert(
    model: &Model,
    cfg: &RunConfig,
    n_episodes: usize,
    seed: u64,
) -> Result<Dataset> {
    let episodes = rollout_many(model, cfg, 0.0, n_episodes, seed, 0)?;
    Ok(Dataset {
        header: header_for(
            cfg,
            "expert",
            BTreeMap::from([("expert".to_string(), 1.0)]),
            seed,
            n_episodes,
        )?,
        episodes,
    })
}

/// Rollouts from the same policy with epsilon 0.2 exploration.
pub fn collect_noisy(
    model: &Model,
    cfg: &RunConfig,
    n_episodes: usize,
    seed: u64,
) -> Result<Dataset> {
    let episodes = rollout_many(model, cfg, 0.2, n_episodes, seed, 0)?;
    Ok(Dataset {
        header: header_for(
            cfg,
            "noisy",
            BTreeMap::from([("noisy".to_string(), 1.0)]),
            seed,
            n_episodes,
        )?,
        episodes,
    })
}

/// One library entry: a restorable policy and its recorded evaluation.
pub struct LibraryEntry {
    pub row: CheckpointRow,
    pub bucket: Option<Bucket>,
}

/// Buckets a checkpoint index by evaluation mean return.
pub fn bucket_library(env_name: &str, rows: &[CheckpointRow]) -> Result<Vec<LibraryEntry>> {
    rows.iter()
        .map(|r| {
            Ok(LibraryEntry {
                row: r.clone(),
                bucket: bucket_of(env_name, r.mean_return)?,
            })
        })
        .collect()
}

/// Quality-mixture collection from a checkpoint library directory (a
/// training run's output with numbered checkpoints and their index).
///
/// Episode counts follow largest-remainder rounding of the scheme's
/// bucket weights; within a bucket, checkpoints take turns round-robin.
/// A required bucket with no checkpoint is a configuration error.
/// Returns the dataset and each episode's source bucket.
pub fn collect_replay(
    run_dir: &Path,
    cfg: &RunConfig,
    scheme: &str,
    n_episodes: usize,
    seed: u64,
) -> Result<(Dataset, Vec<Bucket>)> {
    let weights = replay_mixture(scheme)?;
    let index = crate::train::read_checkpoint_index(&run_dir.join("checkpoints.jsonl"))?;
    let library = bucket_library(&cfg.env, &index)?;

    let by_bucket = |b: Bucket| -> Vec<&LibraryEntry> {
        library.iter().filter(|e| e.bucket == Some(b)).collect()
    };
    let buckets = [Bucket::Good, Bucket::Medium, Bucket::Poor];
    let counts = largest_remainder(&weights, n_episodes);

    let mut episodes = Vec::with_capacity(n_episodes);
    let mut labels = Vec::with_capacity(n_episodes);
    let mut mixture = BTreeMap::new();
    for (k, (&bucket, &count)) in buckets.iter().zip(&counts).enumerate() {
        if weights[k] == 0.0 {
            continue;
        }
        mixture.insert(bucket.name().to_string(), weights[k]);
        let members = by_bucket(bucket);
        if members.is_empty() {
            return Err(TrainError::Invalid(format!(
                "scheme `{scheme}` needs bucket `{}` but the library at {} has no \
                 checkpoint with evaluation return in range",
                bucket.name(),
                run_dir.display()
            )));
        }
        // Spread episodes across the bucket's checkpoints round-robin so
        // no single policy dominates, loading each model once.
        let mut per_member = vec![0usize; members.len()];
        for j in 0..count {
            per_member[j % members.len()] += 1;
        }
        for (m, &quota) in members.iter().zip(&per_member) {
            if quota == 0 {
                continue;
            }
            let model = crate::train::load_run_model(run_dir, &m.row.path)?;
            let eps = rollout_many(&model, cfg, 0.0, quota, seed, 2 * m.row.ordinal + 10)?;
            for e in eps {
                episodes.push(e);
                labels.push(bucket);
            }
        }
    }

    let ds = Dataset {
        header: header_for(cfg, scheme, mixture, seed, episodes.len())?,
        episodes,
    };
    Ok((ds, labels))
}

/// Fraction of recorded actions that differ from the policy's greedy
/// choice, measured by replaying the policy over the dataset episodes
/// (the recurrent state depends only on observations, so the replay
/// reproduces collection-time values exactly).
pub fn nongreedy_fraction(model: &Model, ds: &Dataset) -> Result<f64> {
    let n = ds.header.n_agents;
    let na = ds.header.n_actions;
    let mut mismatches = 0usize;
    let mut total = 0usize;
    for e in &ds.episodes {
        let mut h = model.reset_hidden();
        for t in 0..e.len() {
            let q = model.q_values(&e.obs[t], &mut h)?;
            for i in 0..n {
                let greedy = crate::train::argmax(&q[i * na..(i + 1) * na]);
                if e.actions[t][i] != greedy {
                    mismatches += 1;
                }
                total += 1;
            }
        }
    }
    Ok(mismatches as f64 / total.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn largest_remainder_matches_exact_mixtures() {
        assert_eq!(largest_remainder(&[0.6, 0.2, 0.2], 1000), vec![600, 200, 200]);
        assert_eq!(largest_remainder(&[0.0, 0.8, 0.2], 2000), vec![0, 1600, 400]);
        assert_eq!(largest_remainder(&[0.0, 0.0, 1.0], 7), vec![0, 0, 7]);
        // A case that actually needs remainders: 3 x 1/3.
        let thirds = largest_remainder(&[1.0 / 3.0; 3], 100);
        assert_eq!(thirds.iter().sum::<usize>(), 100);
        assert_eq!(thirds, vec![34, 33, 33]);
    }

    #[test]
    fn buckets_classify_boundaries_upward() {
        assert_eq!(bucket_of("hallway-4x6x10", 1.0).unwrap(), Some(Bucket::Good));
        assert_eq!(bucket_of("hallway-4x6x10", 0.75).unwrap(), Some(Bucket::Good));
        assert_eq!(
            bucket_of("hallway-4x6x10", 0.74).unwrap(),
            Some(Bucket::Medium)
        );
        assert_eq!(bucket_of("hallway-4x6x10", 0.5).unwrap(), Some(Bucket::Medium));
        assert_eq!(bucket_of("hallway-4x6x10", 0.0).unwrap(), Some(Bucket::Poor));
        // Two-group corridor scales by the group count.
        assert_eq!(
            bucket_of("hallway-3x5-4x6x10", 1.5).unwrap(),
            Some(Bucket::Good)
        );
        assert_eq!(
            bucket_of("hallway-3x5-4x6x10", 1.2).unwrap(),
            Some(Bucket::Medium)
        );
        assert_eq!(bucket_of("tj-easy", -3.0).unwrap(), Some(Bucket::Good));
        assert_eq!(bucket_of("tj-easy", -12.0).unwrap(), Some(Bucket::Medium));
        assert_eq!(bucket_of("tj-easy", -100.0).unwrap(), Some(Bucket::Poor));
        assert_eq!(bucket_of("tj-easy", -1000.0).unwrap(), None);
    }

    #[test]
    fn replay_mixture_rejects_unknown_scheme() {
        assert!(replay_mixture("replay-ok").is_err());
        assert_eq!(replay_mixture("replay-good").unwrap(), [0.6, 0.2, 0.2]);
    }
}
