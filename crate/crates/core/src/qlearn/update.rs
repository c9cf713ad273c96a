//! The combined gradient step: masked TD loss through the mixing head
//! plus the weighted representation losses, all on one fresh tape.
//!
//! Target-side values are read out numerically and fed back as constants,
//! so no gradient can leak into the frozen target networks or, through
//! the shared focusing gates, out of the target path.

use crate::config::{Algo, MixerKind, OptimConfig};
use crate::diffcore::{Adam, AdamConfig};
use crate::diffcore::concat_cols;
use crate::diffcore::{DiffError, ParamGroup, Result, Tape, Var};
use crate::masia::aggregate::{encode, focus_gates, repeat_rows_per_agent};
use crate::masia::repr::{reconstruction_loss, rollout_loss};

use super::batch::EpisodeBatch;
use super::nets::{agent_step, qmix_mix, vdn_mix, Model};

#[derive(Debug, Clone, Copy, Default)]
pub struct UpdateStats {
    pub l_rl: f64,
    pub l_ae: f64,
    pub l_m: f64,
    /// Joint gradient norm before clipping.
    pub grad_norm: f64,
}

pub fn make_adam(cfg: &OptimConfig) -> Adam {
    Adam::new(AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
        clip_norm: Some(cfg.clip_norm),
    })
}

/// Everything both Q paths share for one batch: per-step constants, the
/// online and target aggregates, and the focusing gates (online only;
/// the target path reuses them by value).
pub struct Paths {
    pub obs_id_c: Vec<Var>,
    pub state_c: Vec<Var>,
    pub zs_online: Vec<Var>,
    pub zs_target: Vec<Var>,
    /// Online aggregate as seen by the TD path (detached during warmup).
    pub z_td: Vec<Var>,
    pub zbar_on: Vec<Var>,
    pub zbar_tg: Vec<Var>,
}

pub fn build_paths(
    tape: &Tape,
    model: &Model,
    batch: &EpisodeBatch,
    warmup: bool,
) -> Result<Paths> {
    let n = batch.n_agents;
    let cfg = &model.cfg;
    let t_max = batch.max_len();

    let mut paths = Paths {
        obs_id_c: Vec::with_capacity(t_max),
        state_c: Vec::with_capacity(t_max),
        zs_online: Vec::new(),
        zs_target: Vec::new(),
        z_td: Vec::new(),
        zbar_on: Vec::with_capacity(t_max),
        zbar_tg: Vec::with_capacity(t_max),
    };

    let mut obs_c = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let m = batch.alive[t];
        obs_c.push(tape.constant_matrix(m * n, batch.obs_dim, batch.obs[t].clone())?);
        paths.obs_id_c.push(tape.constant_matrix(
            m * n,
            batch.obs_dim + n,
            batch.obs_id[t].clone(),
        )?);
        paths
            .state_c
            .push(tape.constant_matrix(m, batch.state_dim, batch.states[t].clone())?);
    }

    match cfg.algo {
        Algo::Masia => {
            let enc = model.encoder.as_ref().expect("masia model has encoder");
            let enc_t = model.encoder_t.as_ref().expect("masia model has encoder_t");
            let foc = model.focus.as_ref().expect("masia model has focus");
            for t in 0..t_max {
                let z = encode(tape, enc, &cfg.model, n, &obs_c[t])?;
                let zt = encode(tape, enc_t, &cfg.model, n, &obs_c[t])?;
                let g = focus_gates(tape, foc, n, &obs_c[t])?;
                let z_td = if warmup { z.detach() } else { z.clone() };
                paths.zbar_on.push(g.mul(&repeat_rows_per_agent(&z_td, n)?)?);
                paths.zbar_tg.push(g.mul(&repeat_rows_per_agent(&zt, n)?)?);
                paths.zs_online.push(z);
                paths.zs_target.push(zt);
                paths.z_td.push(z_td);
            }
        }
        Algo::Nocomm => {
            let zw = model.zbar_width();
            for t in 0..t_max {
                let m = batch.alive[t];
                let zeros = tape.constant_matrix(m * n, zw, vec![0.0; m * n * zw])?;
                paths.zbar_on.push(zeros.clone());
                paths.zbar_tg.push(zeros);
            }
        }
        Algo::Fullcomm => {
            for t in 0..t_max {
                let m = batch.alive[t];
                let flat =
                    tape.constant_matrix(m, n * batch.obs_dim, batch.obs[t].clone())?;
                let rep = repeat_rows_per_agent(&flat, n)?;
                paths.zbar_on.push(rep.clone());
                paths.zbar_tg.push(rep);
            }
        }
    }
    Ok(paths)
}

#[derive(Clone, Copy, PartialEq)]
pub enum Side {
    Online,
    Target,
}

pub struct ScanOut {
    /// Mixed joint value per step, `[alive_t, 1]`.
    pub q_tot: Vec<Var>,
    /// Per-agent action values per step, `[alive_t * n, n_actions]`.
    pub q: Vec<Var>,
}

/// Runs the recurrent Q network over the whole batch and mixes the chosen
/// values. `actions` picks the evaluated action per agent row; `None`
/// takes each agent's own argmax (the decomposed joint maximum).
pub fn scan_q(
    tape: &Tape,
    model: &Model,
    batch: &EpisodeBatch,
    paths: &Paths,
    side: Side,
    actions: Option<&[Vec<usize>]>,
) -> Result<ScanOut> {
    let n = batch.n_agents;
    let cfg = &model.cfg;
    let hdim = cfg.model.agent_hidden;
    let t_max = batch.max_len();
    let (agent, mixer, zbar) = match side {
        Side::Online => (&model.agent, &model.mixer, &paths.zbar_on),
        Side::Target => (&model.agent_t, &model.mixer_t, &paths.zbar_tg),
    };
    let condition_z = cfg.algo == Algo::Masia && cfg.model.mixer_condition_on_z;

    let mut out = ScanOut {
        q_tot: Vec::with_capacity(t_max),
        q: Vec::with_capacity(t_max),
    };
    let mut h: Option<Var> = None;
    for t in 0..t_max {
        let m = batch.alive[t];
        let h_in = match &h {
            None => tape.constant_matrix(m * n, hdim, vec![0.0; m * n * hdim])?,
            Some(prev) if prev.rows() == m * n => prev.clone(),
            Some(prev) => prev.slice_rows(0, m * n)?,
        };
        let (q, h2) = agent_step(tape, agent, &paths.obs_id_c[t], &zbar[t], &h_in)?;
        h = Some(h2);
        let ids: Vec<usize> = match actions {
            Some(a) => a[t].clone(),
            None => argmax_rows(&q.value(), model.desc.n_actions),
        };
        let chosen = q.select_col_per_row(&ids)?.reshape(m, n)?;
        let q_tot = match cfg.mixer {
            MixerKind::Vdn => vdn_mix(&chosen)?,
            MixerKind::Qmix => {
                let s = if condition_z {
                    let z = match side {
                        Side::Online => &paths.z_td[t],
                        Side::Target => &paths.zs_target[t],
                    };
                    concat_cols(&[paths.state_c[t].clone(), z.clone()])?
                } else {
                    paths.state_c[t].clone()
                };
                qmix_mix(tape, mixer, &chosen, &s, cfg.model.mixing_hidden)?
            }
        };
        out.q_tot.push(q_tot);
        out.q.push(q);
    }
    Ok(out)
}

fn argmax_rows(vals: &[f64], n_actions: usize) -> Vec<usize> {
    vals.chunks_exact(n_actions)
        .map(|row| {
            let mut best = 0;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Mean squared TD error against constant targets built from the target
/// scan: `y_t = r_t + gamma * q_tot_target(t+1)`, zero bootstrap at every
/// episode end. The mean runs over all (episode, step) pairs.
pub fn td_loss(
    tape: &Tape,
    batch: &EpisodeBatch,
    gamma: f64,
    q_tot_online: &[Var],
    q_tot_target: &[Var],
) -> Result<Var> {
    let t_max = batch.max_len();
    let total_steps = batch.total_steps();
    let mut acc: Option<Var> = None;
    for t in 0..t_max {
        let m = batch.alive[t];
        let mut y = vec![0.0; m];
        if t + 1 < t_max {
            let next = q_tot_target[t + 1].value();
            for e in 0..batch.alive[t + 1] {
                y[e] = gamma * next[e];
            }
        }
        for e in 0..m {
            y[e] += batch.rewards[t][e];
        }
        let y_c = tape.constant_matrix(m, 1, y)?;
        let diff = q_tot_online[t].sub(&y_c)?;
        let sq = diff.mul(&diff)?.sum_all();
        acc = Some(match acc {
            Some(a) => a.add(&sq)?,
            None => sq,
        });
    }
    Ok(match acc {
        Some(a) => a.scale(1.0 / total_steps as f64),
        None => tape.constant_scalar(0.0),
    })
}

/// One full gradient step on a batch: TD loss plus the weighted
/// reconstruction and latent-rollout losses, then Adam and the EMA target
/// update. Returns the loss terms (unweighted) and the pre-clip gradient
/// norm.
/// The full objective on one tape, not yet differentiated. The component
/// Vars keep the tape alive, so values and gradients remain reachable.
pub struct CombinedLoss {
    pub total: Var,
    pub l_rl: Var,
    pub l_ae: Var,
    pub l_m: Var,
}

/// Builds the combined objective `L_rl + λ1 L_ae + λ2 L_m` for one batch.
pub fn combined_loss(model: &Model, batch: &EpisodeBatch, env_step: u64) -> Result<CombinedLoss> {
    let cfg = &model.cfg;
    let masia = cfg.algo == Algo::Masia;
    let tape = Tape::new();
    let paths = build_paths(&tape, model, batch, cfg.in_warmup(env_step))?;

    let online = scan_q(&tape, model, batch, &paths, Side::Online, Some(&batch.actions))?;
    let target = scan_q(&tape, model, batch, &paths, Side::Target, None)?;
    let l_rl = td_loss(&tape, batch, cfg.loss.gamma, &online.q_tot, &target.q_tot)?;

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

    let total = l_rl
        .add(&l_ae.scale(cfg.loss.lambda1))?
        .add(&l_m.scale(cfg.loss.lambda2))?;
    Ok(CombinedLoss {
        total,
        l_rl,
        l_ae,
        l_m,
    })
}

pub fn combined_update(
    model: &Model,
    opt: &mut Adam,
    batch: &EpisodeBatch,
    env_step: u64,
) -> Result<UpdateStats> {
    if batch.total_steps() == 0 {
        return Ok(UpdateStats::default());
    }
    let CombinedLoss {
        total,
        l_rl,
        l_ae,
        l_m,
    } = combined_loss(model, batch, env_step)?;
    if !total.item().is_finite() {
        return Err(DiffError::NonFinite {
            context: format!("combined loss at env step {env_step}"),
        });
    }

    let groups: Vec<&ParamGroup> = model.online_groups();
    for g in &groups {
        g.zero_grads();
    }
    total.backward()?;
    let grad_norm = opt.step(&groups)?;
    model.ema_targets()?;

    Ok(UpdateStats {
        l_rl: l_rl.item(),
        l_ae: l_ae.item(),
        l_m: l_m.item(),
        grad_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::envs::EnvDescriptor;
    use crate::qlearn::batch::EpisodeRecord;
    use crate::rng::{derive, Stream};
    use rand::Rng;

    fn desc(n: usize, od: usize, sd: usize, na: usize) -> EnvDescriptor {
        EnvDescriptor {
            name: "test".into(),
            n_agents: n,
            obs_dim: od,
            state_dim: sd,
            n_actions: na,
            episode_limit: 8,
            eval_interval: 1000,
            eval_episodes: 10,
        }
    }

    fn random_episode(rng: &mut impl Rng, len: usize, d: &EnvDescriptor) -> EpisodeRecord {
        EpisodeRecord {
            obs: (0..len)
                .map(|_| {
                    (0..d.n_agents * d.obs_dim)
                        .map(|_| rng.gen_range(-1.0..1.0))
                        .collect()
                })
                .collect(),
            states: (0..len)
                .map(|_| (0..d.state_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
            actions: (0..len)
                .map(|_| {
                    (0..d.n_agents)
                        .map(|_| rng.gen_range(0..d.n_actions))
                        .collect()
                })
                .collect(),
            rewards: (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            active: (0..len).map(|_| vec![true; d.n_agents]).collect(),
            won: false,
        }
    }

    fn run_once(cfg: RunConfig, d: &EnvDescriptor, env_step: u64) -> (Model, UpdateStats) {
        let model = Model::new(cfg, d.clone());
        let mut opt = make_adam(&model.cfg.optim);
        let mut rng = derive(11, Stream::Init, 77);
        let eps: Vec<EpisodeRecord> = [4, 2, 4]
            .iter()
            .map(|&l| random_episode(&mut rng, l, d))
            .collect();
        let refs: Vec<&EpisodeRecord> = eps.iter().collect();
        let batch = EpisodeBatch::build(&refs, d);
        let stats = combined_update(&model, &mut opt, &batch, env_step).unwrap();
        (model, stats)
    }

    #[test]
    fn update_runs_for_every_algo_and_mixer() {
        let d = desc(3, 5, 4, 3);
        for algo in [Algo::Masia, Algo::Nocomm, Algo::Fullcomm] {
            for mixer in [MixerKind::Qmix, MixerKind::Vdn] {
                let mut cfg = RunConfig::default();
                cfg.algo = algo;
                cfg.mixer = mixer;
                let (_, stats) = run_once(cfg, &d, 100_000);
                assert!(stats.l_rl.is_finite() && stats.l_rl >= 0.0);
                assert!(stats.grad_norm > 0.0);
                if algo == Algo::Masia {
                    assert!(stats.l_ae > 0.0 && stats.l_m > 0.0);
                } else {
                    assert_eq!(stats.l_ae, 0.0);
                    assert_eq!(stats.l_m, 0.0);
                }
            }
        }
    }

    #[test]
    fn warmup_blocks_td_gradient_into_encoder() {
        // Identical models and batch; the only difference is the env step.
        // During warmup the encoder gradient comes from the auxiliary
        // losses alone, so it must differ from the post-warmup gradient,
        // while the focusing gates still receive TD gradient in both.
        let d = desc(3, 5, 4, 3);
        let cfg = RunConfig::default();
        let (m_warm, _) = run_once(cfg.clone(), &d, 0);
        let (m_post, _) = run_once(cfg, &d, 60_000);

        let grad_of = |m: &Model, group: &str, name: &str| -> Vec<f64> {
            let g = match group {
                "encoder" => m.encoder.as_ref().unwrap(),
                "focus" => m.focus.as_ref().unwrap(),
                _ => unreachable!(),
            };
            g.get(name).unwrap().borrow().grad().unwrap().to_vec()
        };
        let ge_warm = grad_of(&m_warm, "encoder", "q.w");
        let ge_post = grad_of(&m_post, "encoder", "q.w");
        assert!(ge_warm.iter().any(|&x| x != 0.0));
        assert_ne!(ge_warm, ge_post);

        let gf_warm = grad_of(&m_warm, "focus", "f0.l1.w");
        assert!(gf_warm.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn targets_move_only_by_ema() {
        let d = desc(2, 4, 3, 2);
        let cfg = RunConfig::default();
        let model = Model::new(cfg, d.clone());
        let tau = model.cfg.optim.tau;

        let before_t: Vec<f64> = model.agent_t.get("head.w").unwrap().borrow().data().to_vec();
        let mut opt = make_adam(&model.cfg.optim);
        let mut rng = derive(12, Stream::Init, 78);
        let eps: Vec<EpisodeRecord> = (0..2).map(|_| random_episode(&mut rng, 3, &d)).collect();
        let refs: Vec<&EpisodeRecord> = eps.iter().collect();
        let batch = EpisodeBatch::build(&refs, &d);
        combined_update(&model, &mut opt, &batch, 100_000).unwrap();

        let online_after: Vec<f64> = model.agent.get("head.w").unwrap().borrow().data().to_vec();
        let target_after: Vec<f64> = model.agent_t.get("head.w").unwrap().borrow().data().to_vec();
        for ((b, o), t) in before_t.iter().zip(&online_after).zip(&target_after) {
            let expect = (1.0 - tau) * b + tau * o;
            assert!((t - expect).abs() < 1e-12);
        }
        // Targets hold no gradients at any point.
        assert!(model.agent_t.get("head.w").unwrap().borrow().grad().is_none());
    }

    #[test]
    fn td_targets_bootstrap_zero_at_episode_ends() {
        // One episode of length 2, gamma = 1, reward 1 at each step. With
        // all Q outputs forced to zero (fresh VDN model has small outputs,
        // so instead verify against a hand-built target): y_0 = r_0 +
        // q_tot_target(1), y_1 = r_1. Here we check the constant targets
        // directly through td_loss with zero online values.
        let d = desc(1, 2, 1, 2);
        let tape = Tape::new();
        let q_on: Vec<Var> = (0..2)
            .map(|_| tape.constant_matrix(1, 1, vec![0.0]).unwrap())
            .collect();
        let q_tg: Vec<Var> = [0.5, 0.25]
            .iter()
            .map(|&v| tape.constant_matrix(1, 1, vec![v]).unwrap())
            .collect();
        let e = EpisodeRecord {
            obs: vec![vec![0.0; 2]; 2],
            states: vec![vec![0.0]; 2],
            actions: vec![vec![0]; 2],
            rewards: vec![1.0, 1.0],
            active: vec![vec![true]; 2],
            won: false,
        };
        let refs = [&e];
        let batch = EpisodeBatch::build(&refs, &d);
        let loss = td_loss(&tape, &batch, 0.5, &q_on, &q_tg).unwrap();
        // y_0 = 1 + 0.5 * 0.25 = 1.125 (bootstraps from t=1 target);
        // y_1 = 1 (episode end). Mean of squares over 2 steps.
        let expect = (1.125f64.powi(2) + 1.0) / 2.0;
        assert!((loss.item() - expect).abs() < 1e-12);
    }
}
