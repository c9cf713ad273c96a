//! Representation objectives: reconstruct the global state from `z`, and
//! roll a latent transition model K steps forward, regressing each
//! prediction onto the target-encoder representation of the reached step.
//!
//! Both losses are means over every contributing (timestep, dimension)
//! pair so their scale is comparable to the mean-squared TD loss under
//! unit weights.

use rand_chacha::ChaCha8Rng;

use super::layers::{embedding, init_embedding, init_mlp, mlp};
use crate::config::ModelConfig;
use crate::diffcore::concat_cols;
use crate::diffcore::{ParamGroup, Result, Tape, Var};

pub fn init_decoder(
    rng: &mut ChaCha8Rng,
    cfg: &ModelConfig,
    d_z: usize,
    state_dim: usize,
) -> ParamGroup {
    let mut g = ParamGroup::new("decoder");
    init_mlp(rng, &mut g, "dec", d_z, cfg.decoder_hidden, state_dim);
    g
}

/// Decodes `z` rows into state estimates.
pub fn decode(tape: &Tape, dec: &ParamGroup, z: &Var) -> Result<Var> {
    mlp(tape, dec, "dec", z)
}

pub fn init_latent(
    rng: &mut ChaCha8Rng,
    cfg: &ModelConfig,
    n_agents: usize,
    n_actions: usize,
    d_z: usize,
) -> ParamGroup {
    let mut g = ParamGroup::new("latent");
    init_embedding(rng, &mut g, "embed", n_actions, cfg.action_embed);
    init_mlp(
        rng,
        &mut g,
        "dyn",
        d_z + n_agents * cfg.action_embed,
        cfg.latent_hidden,
        d_z,
    );
    g
}

/// One latent transition: predicts the next representation from the
/// current one and the joint action (shared action embedding per agent,
/// concatenated in agent order). With `residual_latent` the MLP predicts
/// the difference from the current representation.
///
/// `actions` is timestep-major (`m * n_agents` entries for `m` rows of
/// `z`).
pub fn latent_step(
    tape: &Tape,
    lat: &ParamGroup,
    cfg: &ModelConfig,
    n_agents: usize,
    z: &Var,
    actions: &[usize],
) -> Result<Var> {
    let m = z.rows();
    debug_assert_eq!(actions.len(), m * n_agents);
    let mut parts = Vec::with_capacity(1 + n_agents);
    parts.push(z.clone());
    for i in 0..n_agents {
        let ids: Vec<usize> = (0..m).map(|e| actions[e * n_agents + i]).collect();
        parts.push(embedding(tape, lat, "embed", &ids)?);
    }
    let x = concat_cols(&parts)?;
    let delta = mlp(tape, lat, "dyn", &x)?;
    if cfg.residual_latent {
        z.add(&delta)
    } else {
        Ok(delta)
    }
}

/// Mean squared error between decoded states and the true states over all
/// encoded timesteps.
///
/// `zs[t]` holds the representations of the episodes still running at
/// step `t` (a prefix of the batch); `states[t]` is the matching flat
/// `[rows_t * state_dim]` ground truth.
pub fn reconstruction_loss(
    tape: &Tape,
    dec: &ParamGroup,
    zs: &[Var],
    states: &[Vec<f64>],
    state_dim: usize,
) -> Result<Var> {
    debug_assert_eq!(zs.len(), states.len());
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for (z, s) in zs.iter().zip(states) {
        let rows = z.rows();
        if rows == 0 {
            continue;
        }
        let pred = decode(tape, dec, z)?;
        let truth = tape.constant_matrix(rows, state_dim, s.clone())?;
        let diff = pred.sub(&truth)?;
        let sq = diff.mul(&diff)?.sum_all();
        total = Some(match total {
            Some(t) => t.add(&sq)?,
            None => sq,
        });
        count += rows * state_dim;
    }
    Ok(match total {
        Some(t) => t.scale(1.0 / count as f64),
        None => tape.constant_scalar(0.0),
    })
}

/// K-step latent rollout loss.
///
/// For every start `t` with a full horizon (`t + k_steps` still inside
/// the encoded range of at least one episode), the online representation
/// `zs_online[t]` is rolled forward through the latent model using the
/// executed joint actions, and every intermediate prediction is regressed
/// onto the target-encoder representation `zs_target[t+k]`. Episodes are
/// restricted to the prefix that reaches the full horizon, so the window
/// is rectangular per start. The result is the mean over all contributing
/// (start, k, episode, dimension) squared errors.
pub fn rollout_loss(
    tape: &Tape,
    lat: &ParamGroup,
    cfg: &ModelConfig,
    n_agents: usize,
    zs_online: &[Var],
    zs_target: &[Var],
    actions: &[Vec<usize>],
    k_steps: usize,
) -> Result<Var> {
    debug_assert_eq!(zs_online.len(), zs_target.len());
    let horizon = zs_online.len();
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    if k_steps > 0 && horizon > k_steps {
        let d_z = if horizon > 0 { zs_online[0].cols() } else { 0 };
        for t in 0..horizon - k_steps {
            let m = zs_target[t + k_steps].rows();
            if m == 0 {
                break;
            }
            let mut cur = if zs_online[t].rows() == m {
                zs_online[t].clone()
            } else {
                zs_online[t].slice_rows(0, m)?
            };
            for k in 1..=k_steps {
                cur = latent_step(
                    tape,
                    lat,
                    cfg,
                    n_agents,
                    &cur,
                    &actions[t + k - 1][..m * n_agents],
                )?;
                let tgt = if zs_target[t + k].rows() == m {
                    zs_target[t + k].clone()
                } else {
                    zs_target[t + k].slice_rows(0, m)?
                };
                let diff = cur.sub(&tgt)?;
                let sq = diff.mul(&diff)?.sum_all();
                total = Some(match total {
                    Some(tot) => tot.add(&sq)?,
                    None => sq,
                });
                count += m * d_z;
            }
        }
    }
    Ok(match total {
        Some(t) => t.scale(1.0 / count as f64),
        None => tape.constant_scalar(0.0),
    })
}
