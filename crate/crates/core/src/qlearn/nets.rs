//! Networks for decomposed Q-learning: the shared recurrent per-agent Q
//! network, the additive and monotonic mixing heads, and the model bundle
//! tying the online networks to their frozen EMA targets.

use rand_chacha::ChaCha8Rng;

use crate::config::{Algo, MixerKind, ModelConfig, RunConfig};
use crate::diffcore::concat_cols;
use crate::diffcore::{ParamGroup, Result, Tape, Var};
use crate::envs::EnvDescriptor;
use crate::masia::aggregate::{
    d_z, encode, focus_gates, init_encoder, init_focus, repeat_rows_per_agent,
};
use crate::masia::layers::{gru_cell, init_gru, init_linear, linear};
use crate::masia::repr::{init_decoder, init_latent};
use crate::rng::{derive, Stream};

/// Width of the per-agent auxiliary input `z_bar` fed to the Q network
/// alongside the embedded observation.
pub fn zbar_width(cfg: &RunConfig, desc: &EnvDescriptor) -> usize {
    match cfg.algo {
        // The no-communication ablation keeps the aggregate's width (as
        // zeros) so the Q network has an identical parameter count.
        Algo::Masia | Algo::Nocomm => d_z(&cfg.model, desc.n_agents),
        Algo::Fullcomm => desc.n_agents * desc.obs_dim,
    }
}

pub fn init_agent(
    rng: &mut ChaCha8Rng,
    cfg: &ModelConfig,
    obs_dim: usize,
    n_agents: usize,
    n_actions: usize,
    zbar_w: usize,
) -> ParamGroup {
    let mut g = ParamGroup::new("agent");
    init_linear(rng, &mut g, "embed", obs_dim + n_agents, cfg.obs_embed);
    init_gru(rng, &mut g, "gru", cfg.obs_embed + zbar_w, cfg.agent_hidden);
    init_linear(rng, &mut g, "head", cfg.agent_hidden, n_actions);
    g
}

/// One recurrent step of the shared per-agent Q network over a batch of
/// agent rows. Returns the per-action values and the next hidden state.
pub fn agent_step(
    tape: &Tape,
    group: &ParamGroup,
    obs_id: &Var,
    zbar: &Var,
    h: &Var,
) -> Result<(Var, Var)> {
    let x = linear(tape, group, "embed", obs_id)?.relu();
    let xi = concat_cols(&[x, zbar.clone()])?;
    let h2 = gru_cell(tape, group, "gru", &xi, h)?;
    let q = linear(tape, group, "head", &h2)?;
    Ok((q, h2))
}

pub fn init_qmix(
    rng: &mut ChaCha8Rng,
    cfg: &ModelConfig,
    n_agents: usize,
    state_in: usize,
) -> ParamGroup {
    let mut g = ParamGroup::new("mixer");
    init_linear(rng, &mut g, "hw1", state_in, n_agents * cfg.mixing_hidden);
    init_linear(rng, &mut g, "hb1", state_in, cfg.mixing_hidden);
    init_linear(rng, &mut g, "hw2", state_in, cfg.mixing_hidden);
    init_linear(rng, &mut g, "hv", state_in, 1);
    g
}

/// Additive mixing: the joint value is the sum of the chosen per-agent
/// values. `per_agent` is `[m, n_agents]`.
pub fn vdn_mix(per_agent: &Var) -> Result<Var> {
    per_agent.sum_cols()
}

/// Monotonic mixing. Hypernetworks conditioned on `state` produce the
/// mixing weights; absolute values keep `d q_tot / d q_i >= 0` for every
/// state. `per_agent` is `[m, n_agents]`, `state` `[m, state_in]`.
pub fn qmix_mix(
    tape: &Tape,
    group: &ParamGroup,
    per_agent: &Var,
    state: &Var,
    mixing_hidden: usize,
) -> Result<Var> {
    let w1 = linear(tape, group, "hw1", state)?.abs();
    let b1 = linear(tape, group, "hb1", state)?;
    let h = per_agent.rowwise_bmm(&w1, mixing_hidden)?.add(&b1)?.elu();
    let w2 = linear(tape, group, "hw2", state)?.abs();
    let v = linear(tape, group, "hv", state)?;
    h.mul(&w2)?.sum_cols()?.add(&v)
}

/// All networks of one run: the online groups, and frozen EMA copies of
/// the ones that feed the TD target. The focusing gates have no target;
/// the target path reuses the online gates by value.
#[derive(Debug)]
pub struct Model {
    pub cfg: RunConfig,
    pub desc: EnvDescriptor,
    pub encoder: Option<ParamGroup>,
    pub focus: Option<ParamGroup>,
    pub decoder: Option<ParamGroup>,
    pub latent: Option<ParamGroup>,
    pub agent: ParamGroup,
    pub mixer: ParamGroup,
    pub encoder_t: Option<ParamGroup>,
    pub agent_t: ParamGroup,
    pub mixer_t: ParamGroup,
}

impl Model {
    /// Builds every group from per-group RNG streams so the layout of one
    /// network never shifts the initialization of another.
    pub fn new(cfg: RunConfig, desc: EnvDescriptor) -> Self {
        let seed = cfg.seed;
        let mut r_enc = derive(seed, Stream::Init, 0);
        let mut r_foc = derive(seed, Stream::Init, 1);
        let mut r_dec = derive(seed, Stream::Init, 2);
        let mut r_lat = derive(seed, Stream::Init, 3);
        let mut r_agt = derive(seed, Stream::Init, 4);
        let mut r_mix = derive(seed, Stream::Init, 5);

        let masia = cfg.algo == Algo::Masia;
        let dz = d_z(&cfg.model, desc.n_agents);
        let zw = zbar_width(&cfg, &desc);

        let encoder = masia.then(|| init_encoder(&mut r_enc, &cfg.model, desc.obs_dim));
        let focus = masia.then(|| {
            init_focus(&mut r_foc, &cfg.model, desc.n_agents, desc.obs_dim, dz)
        });
        let decoder = masia.then(|| init_decoder(&mut r_dec, &cfg.model, dz, desc.state_dim));
        let latent =
            masia.then(|| init_latent(&mut r_lat, &cfg.model, desc.n_agents, desc.n_actions, dz));
        let agent = init_agent(
            &mut r_agt,
            &cfg.model,
            desc.obs_dim,
            desc.n_agents,
            desc.n_actions,
            zw,
        );
        let mixer = match cfg.mixer {
            MixerKind::Vdn => ParamGroup::new("mixer"),
            MixerKind::Qmix => {
                let sin = mixer_state_width(&cfg, &desc);
                init_qmix(&mut r_mix, &cfg.model, desc.n_agents, sin)
            }
        };

        let encoder_t = encoder.as_ref().map(|e| {
            let t = e.deep_clone("encoder_t");
            t.freeze();
            t
        });
        let agent_t = agent.deep_clone("agent_t");
        agent_t.freeze();
        let mixer_t = mixer.deep_clone("mixer_t");
        mixer_t.freeze();

        Model {
            cfg,
            desc,
            encoder,
            focus,
            decoder,
            latent,
            agent,
            mixer,
            encoder_t,
            agent_t,
            mixer_t,
        }
    }

    /// Trainable groups in a fixed order (optimizer and checkpoint order).
    pub fn online_groups(&self) -> Vec<&ParamGroup> {
        let mut v = Vec::new();
        for g in [&self.encoder, &self.focus, &self.decoder, &self.latent] {
            if let Some(g) = g {
                v.push(g);
            }
        }
        v.push(&self.agent);
        v.push(&self.mixer);
        v
    }

    /// Online and target groups, for checkpointing a complete run state.
    pub fn all_groups(&self) -> Vec<&ParamGroup> {
        let mut v = self.online_groups();
        if let Some(e) = &self.encoder_t {
            v.push(e);
        }
        v.push(&self.agent_t);
        v.push(&self.mixer_t);
        v
    }

    /// EMA step for every target group.
    pub fn ema_targets(&self) -> Result<()> {
        let tau = self.cfg.optim.tau;
        if let (Some(t), Some(o)) = (&self.encoder_t, &self.encoder) {
            crate::diffcore::ema_update(t, o, tau)?;
        }
        crate::diffcore::ema_update(&self.agent_t, &self.agent, tau)?;
        crate::diffcore::ema_update(&self.mixer_t, &self.mixer, tau)
    }

    /// Copies online weights into the targets verbatim (tau = 1), used
    /// right after restoring a checkpoint that only stored online groups.
    pub fn sync_targets(&self) -> Result<()> {
        if let (Some(t), Some(o)) = (&self.encoder_t, &self.encoder) {
            crate::diffcore::ema_update(t, o, 1.0)?;
        }
        crate::diffcore::ema_update(&self.agent_t, &self.agent, 1.0)?;
        crate::diffcore::ema_update(&self.mixer_t, &self.mixer, 1.0)
    }

    pub fn zbar_width(&self) -> usize {
        zbar_width(&self.cfg, &self.desc)
    }

    /// Fresh recurrent state for one episode, all agents.
    pub fn reset_hidden(&self) -> Vec<f64> {
        vec![0.0; self.desc.n_agents * self.cfg.model.agent_hidden]
    }

    /// Per-agent action values for one environment step during acting.
    ///
    /// `obs_flat` is all agents' observations concatenated; `hidden` is
    /// updated in place. Returns `n_agents * n_actions` values row-major
    /// by agent. Runs the online networks on a throwaway tape.
    pub fn q_values(&self, obs_flat: &[f64], hidden: &mut [f64]) -> Result<Vec<f64>> {
        let n = self.desc.n_agents;
        let od = self.desc.obs_dim;
        debug_assert_eq!(obs_flat.len(), n * od);
        let tape = Tape::new();
        let obs = tape.constant_matrix(n, od, obs_flat.to_vec())?;
        let mut oid = Vec::with_capacity(n * (od + n));
        for i in 0..n {
            oid.extend_from_slice(&obs_flat[i * od..(i + 1) * od]);
            for j in 0..n {
                oid.push(if i == j { 1.0 } else { 0.0 });
            }
        }
        let obs_id = tape.constant_matrix(n, od + n, oid)?;
        let zbar = acting_zbar(&tape, self, &obs, obs_flat)?;
        let h = tape.constant_matrix(n, self.cfg.model.agent_hidden, hidden.to_vec())?;
        let (q, h2) = agent_step(&tape, &self.agent, &obs_id, &zbar, &h)?;
        hidden.copy_from_slice(&h2.value());
        Ok(q.value_vec())
    }
}

/// The auxiliary input rows for a single timestep during acting.
fn acting_zbar(tape: &Tape, model: &Model, obs: &Var, obs_flat: &[f64]) -> Result<Var> {
    let n = model.desc.n_agents;
    match model.cfg.algo {
        Algo::Masia => {
            let enc = model.encoder.as_ref().expect("masia model has encoder");
            let foc = model.focus.as_ref().expect("masia model has focus");
            let z = encode(tape, enc, &model.cfg.model, n, obs)?;
            let gates = focus_gates(tape, foc, n, obs)?;
            gates.mul(&repeat_rows_per_agent(&z, n)?)
        }
        Algo::Nocomm => {
            let zw = model.zbar_width();
            tape.constant_matrix(n, zw, vec![0.0; n * zw])
        }
        Algo::Fullcomm => {
            let flat = tape.constant_matrix(1, obs_flat.len(), obs_flat.to_vec())?;
            repeat_rows_per_agent(&flat, n)
        }
    }
}

/// Width of the conditioning input to the QMIX hypernetworks.
pub fn mixer_state_width(cfg: &RunConfig, desc: &EnvDescriptor) -> usize {
    let mut w = desc.state_dim;
    if cfg.algo == Algo::Masia && cfg.model.mixer_condition_on_z {
        w += d_z(&cfg.model, desc.n_agents);
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_desc() -> EnvDescriptor {
        EnvDescriptor {
            name: "test".into(),
            n_agents: 3,
            obs_dim: 5,
            state_dim: 4,
            n_actions: 2,
            episode_limit: 10,
            eval_interval: 1000,
            eval_episodes: 10,
        }
    }

    #[test]
    fn vdn_sums_per_agent_values() {
        let tape = Tape::new();
        let q = tape
            .constant_matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.25])
            .unwrap();
        let tot = vdn_mix(&q).unwrap();
        assert_eq!(tot.value_vec(), vec![6.0, -0.25]);
    }

    #[test]
    fn qmix_outputs_finite_scalar_per_row() {
        let mut rng = derive(3, Stream::Init, 9);
        let cfg = ModelConfig::default();
        let g = init_qmix(&mut rng, &cfg, 3, 4);
        let tape = Tape::new();
        let q = tape
            .constant_matrix(2, 3, (0..6).map(|i| i as f64 * 0.3 - 1.0).collect())
            .unwrap();
        let s = tape
            .constant_matrix(2, 4, (0..8).map(|i| (i as f64).sin()).collect())
            .unwrap();
        let tot = qmix_mix(&tape, &g, &q, &s, cfg.mixing_hidden).unwrap();
        assert_eq!(tot.shape(), vec![2, 1]);
        assert!(tot.value_vec().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn model_groups_and_targets_match_algo() {
        let desc = small_desc();
        let mut cfg = RunConfig::default();
        cfg.algo = Algo::Masia;
        let m = Model::new(cfg.clone(), desc.clone());
        assert_eq!(m.online_groups().len(), 6);
        assert!(m.encoder_t.is_some());

        cfg.algo = Algo::Nocomm;
        let m2 = Model::new(cfg.clone(), desc.clone());
        assert_eq!(m2.online_groups().len(), 2);
        assert!(m2.encoder_t.is_none());

        cfg.mixer = MixerKind::Vdn;
        let m3 = Model::new(cfg, desc);
        assert!(m3.mixer.is_empty());
    }

    #[test]
    fn nocomm_and_masia_agent_nets_have_equal_size() {
        let desc = small_desc();
        let mut cfg = RunConfig::default();
        cfg.algo = Algo::Masia;
        let a = Model::new(cfg.clone(), desc.clone()).agent.n_elements();
        cfg.algo = Algo::Nocomm;
        let b = Model::new(cfg, desc).agent.n_elements();
        assert_eq!(a, b);
    }

    #[test]
    fn q_values_advance_hidden_state_deterministically() {
        let desc = small_desc();
        let cfg = RunConfig::default();
        let m = Model::new(cfg, desc.clone());
        let mut rng = derive(7, Stream::Init, 8);
        let obs: Vec<f64> = (0..desc.n_agents * desc.obs_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();

        let mut h1 = m.reset_hidden();
        let q1 = m.q_values(&obs, &mut h1).unwrap();
        let q1b = m.q_values(&obs, &mut h1).unwrap();
        assert_ne!(q1, q1b, "hidden state should evolve between steps");

        let mut h2 = m.reset_hidden();
        let q2 = m.q_values(&obs, &mut h2).unwrap();
        assert_eq!(q1, q2, "same inputs and state give identical values");
        assert_eq!(q1.len(), desc.n_agents * desc.n_actions);
    }
}
