//! Information aggregation: per-timestep self-attention over the stacked
//! agent observations, an integration stage collapsing the attention rows
//! into one vector `z` per timestep, and per-agent focusing gates.
//!
//! Batch convention: a "stacked" matrix holds `m` independent timesteps of
//! `n` agents each as `m*n` rows in timestep-major order (row `e*n + i` is
//! agent `i` of timestep `e`). Attention mixes rows only within a
//! timestep.

use rand_chacha::ChaCha8Rng;

use super::layers::{gru_cell, init_gru, init_linear, init_mlp, linear, mlp};
use crate::config::{Integration, ModelConfig};
use crate::diffcore::concat_rows;
use crate::diffcore::{ParamGroup, Result, Tape, Var};

/// Width of the aggregated representation for `n` agents.
pub fn d_z(cfg: &ModelConfig, n_agents: usize) -> usize {
    match cfg.integration {
        Integration::Gru => n_agents * cfg.agg_hidden,
        Integration::Mean | Integration::Sum => cfg.attn_dim,
    }
}

pub fn init_encoder(rng: &mut ChaCha8Rng, cfg: &ModelConfig, obs_dim: usize) -> ParamGroup {
    let mut g = ParamGroup::new("encoder");
    init_linear(rng, &mut g, "q", obs_dim, cfg.d_qk);
    init_linear(rng, &mut g, "k", obs_dim, cfg.d_qk);
    init_linear(rng, &mut g, "v", obs_dim, cfg.attn_dim);
    if cfg.integration == Integration::Gru {
        init_gru(rng, &mut g, "agg", cfg.attn_dim, cfg.agg_hidden);
    }
    g
}

/// Aggregates stacked observations `[m*n, obs_dim]` into `z` of shape
/// `[m, d_z]`.
///
/// Under the pooled integrations `z` is permutation invariant in the
/// agents. Under the recurrent integration every attention row passes
/// through the shared GRU cell separately (from a zero hidden state) and
/// the per-agent outputs are flattened, so permuting agents permutes the
/// corresponding blocks of `z`.
pub fn encode(
    tape: &Tape,
    enc: &ParamGroup,
    cfg: &ModelConfig,
    n_agents: usize,
    obs: &Var,
) -> Result<Var> {
    let rows = obs.rows();
    debug_assert_eq!(rows % n_agents, 0);
    let m = rows / n_agents;

    let q = linear(tape, enc, "q", obs)?;
    let k = linear(tape, enc, "k", obs)?;
    let v = linear(tape, enc, "v", obs)?;
    let inv_sqrt = 1.0 / (cfg.d_qk as f64).sqrt();

    let mut pooled = Vec::with_capacity(m);
    for e in 0..m {
        let (lo, hi) = (e * n_agents, (e + 1) * n_agents);
        let qe = q.slice_rows(lo, hi)?;
        let ke = k.slice_rows(lo, hi)?;
        let ve = v.slice_rows(lo, hi)?;
        let att = qe.matmul_nt(&ke)?.scale(inv_sqrt).softmax_rows()?;
        pooled.push(att.matmul(&ve)?);
    }
    let h = if pooled.len() == 1 {
        pooled.pop().expect("nonempty")
    } else {
        concat_rows(&pooled)?
    };

    match cfg.integration {
        Integration::Mean => h.pool_rows_grouped(n_agents, true),
        Integration::Sum => h.pool_rows_grouped(n_agents, false),
        Integration::Gru => {
            let zero = tape.constant_matrix(rows, cfg.agg_hidden, vec![0.0; rows * cfg.agg_hidden])?;
            let per_row = gru_cell(tape, enc, "agg", &h, &zero)?;
            per_row.reshape(m, n_agents * cfg.agg_hidden)
        }
    }
}

pub fn init_focus(
    rng: &mut ChaCha8Rng,
    cfg: &ModelConfig,
    n_agents: usize,
    obs_dim: usize,
    d_z: usize,
) -> ParamGroup {
    let mut g = ParamGroup::new("focus");
    for i in 0..n_agents {
        init_mlp(rng, &mut g, &format!("f{i}"), obs_dim, cfg.focus_hidden, d_z);
    }
    g
}

/// Per-agent sigmoid gates over `z`, one row per stacked observation row.
///
/// Each agent has its own MLP; the result is returned in the same
/// timestep-major row order as `obs`, so `gates.mul(&z_rows)` yields the
/// extracted representations when `z_rows` repeats each timestep's `z`
/// once per agent.
pub fn focus_gates(
    tape: &Tape,
    foc: &ParamGroup,
    n_agents: usize,
    obs: &Var,
) -> Result<Var> {
    let rows = obs.rows();
    debug_assert_eq!(rows % n_agents, 0);
    let m = rows / n_agents;

    let mut per_agent = Vec::with_capacity(n_agents);
    for i in 0..n_agents {
        let idx: Vec<usize> = (0..m).map(|e| e * n_agents + i).collect();
        let oi = obs.gather_rows(&idx)?;
        per_agent.push(mlp(tape, foc, &format!("f{i}"), &oi)?.sigmoid());
    }
    if n_agents == 1 {
        return Ok(per_agent.pop().expect("nonempty"));
    }
    // Agent-major stack back to timestep-major rows.
    let stacked = concat_rows(&per_agent)?;
    let perm: Vec<usize> = (0..rows)
        .map(|row| (row % n_agents) * m + row / n_agents)
        .collect();
    stacked.gather_rows(&perm)
}

/// Repeats each timestep row of `z` once per agent: `[m, d] -> [m*n, d]`.
pub fn repeat_rows_per_agent(z: &Var, n_agents: usize) -> Result<Var> {
    let m = z.rows();
    let idx: Vec<usize> = (0..m * n_agents).map(|row| row / n_agents).collect();
    z.gather_rows(&idx)
}
