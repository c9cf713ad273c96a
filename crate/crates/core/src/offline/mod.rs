//! Offline learning on fixed datasets.
//!
//! Two stages: representation pre-training (the auxiliary losses alone,
//! updating encoder, decoder, and latent model), then joint training of
//! the full objective with a conservative TD term. The environment is
//! touched only by greedy evaluation, which runs on separate instances;
//! an interaction counter on the config's environment handle is asserted
//! untouched at the end of the run.

pub mod collect;
pub mod dataset;

pub use collect::{
    bucket_library, bucket_of, bucket_ranges, collect_expert, collect_noisy, collect_replay,
    largest_remainder, nongreedy_fraction, replay_mixture, Bucket, LibraryEntry,
};
pub use dataset::{
    read_dataset, validate, validate_file, write_dataset, Dataset, DatasetHeader,
    ValidationReport,
};

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Algo, Regularizer, RunConfig};
use crate::diffcore::{ema_update, Adam};
use crate::diffcore::{DiffError, ParamGroup, Tape, Var};
use crate::envs::make_env;
use crate::masia::repr::{reconstruction_loss, rollout_loss};
use crate::qlearn::update::{build_paths, scan_q, Side};
use crate::qlearn::{make_adam, td_loss, EpisodeBatch, EpisodeRecord, Model, UpdateStats};
use crate::rng::{derive, Stream};
use crate::train::{evaluate, LossAccum, MetricsRow, Result, TrainError};

fn sample_refs<'a>(
    ds: &'a Dataset,
    rng: &mut ChaCha8Rng,
    k: usize,
) -> Vec<&'a EpisodeRecord> {
    let k = k.min(ds.episodes.len());
    rand::seq::index::sample(rng, ds.episodes.len(), k)
        .iter()
        .map(|i| &ds.episodes[i])
        .collect()
}

/// Stage-one step: the weighted auxiliary losses only, updating the
/// encoder, decoder, and latent model; the Q network, focusing gates, and
/// mixer are untouched. The encoder target tracks by EMA as usual.
pub(crate) fn pretrain_update(
    model: &Model,
    opt: &mut Adam,
    batch: &EpisodeBatch,
) -> Result<UpdateStats> {
    let cfg = &model.cfg;
    let tape = Tape::new();
    let paths = build_paths(&tape, model, batch, false)?;

    let l_ae = if cfg.loss.lambda1 != 0.0 {
        reconstruction_loss(
            &tape,
            model.decoder.as_ref().expect("pretraining needs a decoder"),
            &paths.zs_online,
            &batch.states,
            batch.state_dim,
        )?
    } else {
        tape.constant_scalar(0.0)
    };
    let l_m = if cfg.loss.lambda2 != 0.0 && cfg.model.rollout_k > 0 {
        rollout_loss(
            &tape,
            model.latent.as_ref().expect("pretraining needs a latent model"),
            &cfg.model,
            batch.n_agents,
            &paths.zs_online,
            &paths.zs_target,
            &batch.actions,
            cfg.model.rollout_k,
        )?
    } else {
        tape.constant_scalar(0.0)
    };
    let total = l_ae.scale(cfg.loss.lambda1).add(&l_m.scale(cfg.loss.lambda2))?;
    if !total.item().is_finite() {
        return Err(TrainError::Diff(DiffError::NonFinite {
            context: "pre-training loss".to_string(),
        }));
    }

    let groups: Vec<&ParamGroup> = [&model.encoder, &model.decoder, &model.latent]
        .iter()
        .filter_map(|g| g.as_ref())
        .collect();
    for g in &groups {
        g.zero_grads();
    }
    total.backward().map_err(TrainError::Diff)?;
    let grad_norm = opt.step(&groups).map_err(TrainError::Diff)?;
    if let (Some(t), Some(o)) = (&model.encoder_t, &model.encoder) {
        ema_update(t, o, cfg.optim.tau).map_err(TrainError::Diff)?;
    }
    Ok(UpdateStats {
        l_rl: 0.0,
        l_ae: l_ae.item(),
        l_m: l_m.item(),
        grad_norm,
    })
}

/// Stage-two step: conservative TD plus the auxiliary losses.
///
/// The TD target is the standard decomposed maximum in both modes; the
/// `conservative` regularizer adds a value-pushdown penalty
/// `beta * mean(logsumexp_a Q_i - Q_i(a_data))` that suppresses action
/// values the dataset never takes, keeping the implicit greedy policy
/// near the data distribution while the max backup still performs policy
/// improvement. With `none` the penalty is dropped and the update is the
/// online TD rule on fixed data.
pub(crate) fn offline_update(
    model: &Model,
    opt: &mut Adam,
    batch: &EpisodeBatch,
) -> Result<UpdateStats> {
    let cfg = &model.cfg;
    let masia = cfg.algo == Algo::Masia;
    let tape = Tape::new();
    let paths = build_paths(&tape, model, batch, false)?;

    let online = scan_q(&tape, model, batch, &paths, Side::Online, Some(&batch.actions))?;
    let target = scan_q(&tape, model, batch, &paths, Side::Target, None)?;
    let l_td = td_loss(&tape, batch, cfg.loss.gamma, &online.q_tot, &target.q_tot)?;

    let penalty = if cfg.offline.regularizer == Regularizer::Conservative
        && cfg.offline.beta != 0.0
    {
        let mut acc: Option<Var> = None;
        let mut count = 0usize;
        for t in 0..batch.max_len() {
            let q = &online.q[t];
            let lse = q.logsumexp_cols()?;
            let sel = q.select_col_per_row(&batch.actions[t])?;
            let gap = lse.sub(&sel)?.sum_all();
            acc = Some(match acc {
                Some(a) => a.add(&gap)?,
                None => gap,
            });
            count += batch.alive[t] * batch.n_agents;
        }
        match acc {
            Some(a) => a.scale(cfg.offline.beta / count as f64),
            None => tape.constant_scalar(0.0),
        }
    } else {
        tape.constant_scalar(0.0)
    };

    let l_ae = if masia && cfg.loss.lambda1 != 0.0 {
        reconstruction_loss(
            &tape,
            model.decoder.as_ref().expect("masia model has decoder"),
            &paths.zs_online,
            &batch.states,
            batch.state_dim,
        )?
    } else {
        tape.constant_scalar(0.0)
    };
    let l_m = if masia && cfg.loss.lambda2 != 0.0 && cfg.model.rollout_k > 0 {
        rollout_loss(
            &tape,
            model.latent.as_ref().expect("masia model has latent"),
            &cfg.model,
            batch.n_agents,
            &paths.zs_online,
            &paths.zs_target,
            &batch.actions,
            cfg.model.rollout_k,
        )?
    } else {
        tape.constant_scalar(0.0)
    };

    let total = l_td
        .add(&penalty)?
        .add(&l_ae.scale(cfg.loss.lambda1))?
        .add(&l_m.scale(cfg.loss.lambda2))?;
    if !total.item().is_finite() {
        return Err(TrainError::Diff(DiffError::NonFinite {
            context: "offline joint loss".to_string(),
        }));
    }

    let groups = model.online_groups();
    for g in &groups {
        g.zero_grads();
    }
    total.backward().map_err(TrainError::Diff)?;
    let grad_norm = opt.step(&groups).map_err(TrainError::Diff)?;
    model.ema_targets().map_err(TrainError::Diff)?;

    Ok(UpdateStats {
        l_rl: l_td.item(),
        l_ae: l_ae.item(),
        l_m: l_m.item(),
        grad_norm,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OfflineSummary {
    pub env: String,
    pub seed: u64,
    pub dataset: String,
    pub scheme: String,
    pub pretrain_steps: u64,
    pub joint_steps: u64,
    pub evals: usize,
    pub last_win_rate: f64,
    /// Mean win rate over the final three evaluations.
    pub final_win_rate: f64,
    pub wall_seconds: f64,
}

/// Runs both offline stages on the dataset at `dataset_path`, writing the
/// same artifact set as online training into `out_dir`. Metric rows use
/// the stage-two gradient step as `env_step`.
pub fn train_offline(
    cfg: &RunConfig,
    dataset_path: &Path,
    out_dir: &Path,
    verbose: bool,
) -> Result<OfflineSummary> {
    let start = Instant::now();
    fs::create_dir_all(out_dir)?;
    let marker = out_dir.join(".incomplete");
    fs::write(&marker, b"")?;
    fs::write(
        out_dir.join("config.json"),
        serde_json::to_string_pretty(cfg)?,
    )?;

    let ds = read_dataset(dataset_path)?;
    dataset::validate(&ds)?;

    // The only environment handle the trainer holds; it exists to pin the
    // descriptor and to prove no learning code steps it.
    let audit_env = make_env(&cfg.env, cfg.seed, cfg.sight)?;
    let desc = audit_env.descriptor().clone();
    let h = &ds.header;
    if h.env != cfg.env
        || h.n_agents != desc.n_agents
        || h.obs_dim != desc.obs_dim
        || h.state_dim != desc.state_dim
        || h.n_actions != desc.n_actions
    {
        return Err(TrainError::Invalid(format!(
            "dataset {} (env `{}`, {} agents, obs {}, state {}, {} actions) does not match \
             environment `{}` ({} agents, obs {}, state {}, {} actions)",
            dataset_path.display(),
            h.env,
            h.n_agents,
            h.obs_dim,
            h.state_dim,
            h.n_actions,
            cfg.env,
            desc.n_agents,
            desc.obs_dim,
            desc.state_dim,
            desc.n_actions,
        )));
    }

    let model = Model::new(cfg.clone(), desc);
    let mut sampler = derive(cfg.seed, Stream::Sampler, 0);

    // Stage one. A fresh optimizer per stage keeps moment estimates and
    // bias correction meaningful for the parameters each stage trains.
    let aux_active = cfg.loss.lambda1 != 0.0 || cfg.loss.lambda2 != 0.0;
    if cfg.offline.pretrain_steps > 0 && aux_active && model.encoder.is_some() {
        let mut opt = make_adam(&cfg.optim);
        for step in 0..cfg.offline.pretrain_steps {
            let refs = sample_refs(&ds, &mut sampler, cfg.train.batch);
            let batch = EpisodeBatch::build(&refs, &model.desc);
            let stats = pretrain_update(&model, &mut opt, &batch)?;
            if verbose && (step + 1) % 1000 == 0 {
                println!(
                    "pretrain {:>7}/{}  L_ae {:.5}  L_m {:.5}",
                    step + 1,
                    cfg.offline.pretrain_steps,
                    stats.l_ae,
                    stats.l_m
                );
            }
        }
    }

    // Stage two.
    let mut opt = make_adam(&cfg.optim);
    let mut metrics = BufWriter::new(fs::File::create(out_dir.join("metrics.jsonl"))?);
    let mut losses = LossAccum::default();
    let mut recent_wins: Vec<f64> = Vec::new();
    let mut ordinal: u64 = 0;
    let eval_interval = cfg.offline.eval_interval.max(1);
    let eval_episodes = if cfg.train.eval_episodes > 0 {
        cfg.train.eval_episodes
    } else {
        model.desc.eval_episodes
    };

    let mut eval_and_log = |step: u64,
                            ordinal: &mut u64,
                            losses: &mut LossAccum,
                            recent: &mut Vec<f64>|
     -> Result<()> {
        let r = evaluate(&model, &cfg.env, cfg.sight, cfg.seed, *ordinal, eval_episodes)?;
        let (l_rl, l_ae, l_m) = losses.drain();
        let row = MetricsRow {
            env_step: step,
            test_win_rate: r.win_rate,
            mean_return: r.mean_return,
            l_rl,
            l_ae,
            l_m,
            epsilon: 0.0,
            seed: cfg.seed,
        };
        serde_json::to_writer(&mut metrics, &row)?;
        metrics.write_all(b"\n")?;
        metrics.flush()?;
        if verbose {
            println!(
                "joint {:>7}  win {:.3}  return {:+.3}  L_rl {:.5}",
                step, r.win_rate, r.mean_return, l_rl
            );
        }
        recent.push(r.win_rate);
        *ordinal += 1;
        Ok(())
    };

    for step in 0..cfg.offline.joint_steps {
        if step % eval_interval == 0 {
            eval_and_log(step, &mut ordinal, &mut losses, &mut recent_wins)?;
        }
        let refs = sample_refs(&ds, &mut sampler, cfg.train.batch);
        let batch = EpisodeBatch::build(&refs, &model.desc);
        let stats = offline_update(&model, &mut opt, &batch)?;
        losses.push(&stats);
    }
    eval_and_log(
        cfg.offline.joint_steps,
        &mut ordinal,
        &mut losses,
        &mut recent_wins,
    )?;
    drop(eval_and_log);

    crate::diffcore::save_checkpoint(
        &out_dir.join("final.ckpt"),
        crate::diffcore::CheckpointMeta {
            step: cfg.offline.joint_steps,
            seed: cfg.seed,
        },
        &model.all_groups(),
    )?;

    if audit_env.interactions() != 0 {
        return Err(TrainError::Invalid(format!(
            "offline learner stepped the environment {} times",
            audit_env.interactions()
        )));
    }

    let tail = recent_wins.iter().rev().take(3).copied().collect::<Vec<_>>();
    let summary = OfflineSummary {
        env: cfg.env.clone(),
        seed: cfg.seed,
        dataset: dataset_path.display().to_string(),
        scheme: ds.header.scheme.clone(),
        pretrain_steps: cfg.offline.pretrain_steps,
        joint_steps: cfg.offline.joint_steps,
        evals: ordinal as usize,
        last_win_rate: recent_wins.last().copied().unwrap_or(0.0),
        final_win_rate: if tail.is_empty() {
            0.0
        } else {
            tail.iter().sum::<f64>() / tail.len() as f64
        },
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    fs::remove_file(&marker)?;
    Ok(summary)
}
