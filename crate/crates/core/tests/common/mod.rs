//! Shared machinery for the integration suites: finite-difference
//! gradient checks (per-op and end-to-end), the aggregation permutation
//! properties, and mixer monotonicity sweeps. Each returns its worst
//! observed deviation so callers can assert the tolerance they need.
#![allow(dead_code)]

use masia_core::config::{Algo, Integration, MixerKind, ModelConfig, RunConfig};
use masia_core::diffcore::{concat_cols, concat_rows, Param, ParamGroup, Tape, Tensor, Var};
use masia_core::envs::make_env;
use masia_core::masia::{encode, init_encoder, reconstruction_loss, rollout_loss};
use masia_core::qlearn::{
    build_paths, init_qmix, qmix_mix, scan_q, td_loss, EpisodeBatch, Model, Side,
};
use masia_core::train::rollout_episode;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

pub fn vals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Values bounded away from zero, for ops with a kink at the origin.
pub fn vals_off_kink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

/// Normalized deviation between an analytic and a numeric derivative:
/// relative where the gradient is O(1), absolute (with floor `scale`)
/// near zero.
fn deviation(ana: f64, num: f64, scale: f64) -> f64 {
    (ana - num).abs() / (scale + ana.abs().max(num.abs()))
}

/// Checks analytic gradients of a scalar-valued builder against central
/// differences for every element of every input; panics past `rel_tol`
/// and returns the worst normalized deviation.
pub fn check<F>(name: &str, inputs: &[(Vec<usize>, Vec<f64>)], rel_tol: f64, f: F) -> f64
where
    F: Fn(&Tape, &[Var]) -> Var,
{
    let mut group = ParamGroup::new("gc");
    let params: Vec<Param> = inputs
        .iter()
        .enumerate()
        .map(|(k, (shape, data))| {
            group.add(
                format!("x{k}"),
                Tensor::new(shape.clone(), data.clone()).unwrap(),
            )
        })
        .collect();
    let eval = || {
        let tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
        f(&tape, &vars)
    };

    group.zero_grads();
    let y = eval();
    assert_eq!(y.rows() * y.cols(), 1, "{name}: builder must return a scalar");
    assert!(y.item().is_finite(), "{name}: non-finite base value");
    y.backward().unwrap();
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| {
            let t = p.borrow();
            t.grad()
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.data().len()])
        })
        .collect();

    let mut worst = 0.0f64;
    for (k, p) in params.iter().enumerate() {
        let n = p.borrow().data().len();
        for i in 0..n {
            let x0 = p.borrow().data()[i];
            p.borrow_mut().data_mut()[i] = x0 + H;
            let fp = eval().item();
            p.borrow_mut().data_mut()[i] = x0 - H;
            let fm = eval().item();
            p.borrow_mut().data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * H);
            let ana = analytic[k][i];
            let dev = deviation(ana, numeric, 1e-3);
            assert!(
                dev <= rel_tol,
                "{name}: input {k} element {i}: analytic {ana} vs numeric {numeric}"
            );
            worst = worst.max(dev);
        }
    }
    worst
}

/// Random fixed weights so the reduction to a scalar is sensitive to every
/// output position and sign.
pub fn weighted_sum(tape: &Tape, v: &Var, w: &[f64]) -> Var {
    let c = tape
        .constant_matrix(v.rows(), v.cols(), w.to_vec())
        .unwrap();
    v.mul(&c).unwrap().sum_all()
}

/// Every differentiable op against central differences. Returns the worst
/// normalized deviation; panics past `rel_tol`.
pub fn run_op_checks(rel_tol: f64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let w6 = vals(&mut r, 6);
    let w8 = vals(&mut r, 8);
    let w4 = vals(&mut r, 4);
    let w12 = vals(&mut r, 12);
    let w15 = vals(&mut r, 15);
    let w3 = vals(&mut r, 3);
    let mut worst = 0.0f64;
    let mut track = |d: f64| worst = worst.max(d);

    let a23 = (vec![2usize, 3], vals(&mut r, 6));
    let b23 = (vec![2usize, 3], vals(&mut r, 6));
    track(check("add", &[a23.clone(), b23.clone()], rel_tol, |t, x| {
        weighted_sum(t, &x[0].add(&x[1]).unwrap(), &w6)
    }));
    track(check("sub", &[a23.clone(), b23.clone()], rel_tol, |t, x| {
        weighted_sum(t, &x[0].sub(&x[1]).unwrap(), &w6)
    }));
    track(check("mul", &[a23.clone(), b23.clone()], rel_tol, |t, x| {
        weighted_sum(t, &x[0].mul(&x[1]).unwrap(), &w6)
    }));
    track(check("scale", &[a23.clone()], rel_tol, |t, x| {
        weighted_sum(t, &x[0].scale(-1.7), &w6)
    }));
    track(check(
        "add_row",
        &[a23.clone(), (vec![3usize], vals(&mut r, 3))],
        rel_tol,
        |t, x| weighted_sum(t, &x[0].add_row(&x[1]).unwrap(), &w6),
    ));

    track(check(
        "matmul_small",
        &[
            (vec![2usize, 3], vals(&mut r, 6)),
            (vec![3usize, 4], vals(&mut r, 12)),
        ],
        rel_tol,
        |t, x| weighted_sum(t, &x[0].matmul(&x[1]).unwrap(), &w8),
    ));
    // 16x16x16 crosses the blocked-GEMM dispatch threshold.
    let big_w = vals(&mut r, 256);
    track(check(
        "matmul_gemm",
        &[
            (vec![16usize, 16], vals(&mut r, 256)),
            (vec![16usize, 16], vals(&mut r, 256)),
        ],
        rel_tol,
        |t, x| weighted_sum(t, &x[0].matmul(&x[1]).unwrap(), &big_w),
    ));
    track(check(
        "matmul_nt",
        &[
            (vec![2usize, 3], vals(&mut r, 6)),
            (vec![4usize, 3], vals(&mut r, 12)),
        ],
        rel_tol,
        |t, x| weighted_sum(t, &x[0].matmul_nt(&x[1]).unwrap(), &w8),
    ));

    let kinky = (vec![2usize, 3], vals_off_kink(&mut r, 6));
    track(check("relu", &[kinky.clone()], rel_tol, |t, x| {
        weighted_sum(t, &x[0].relu(), &w6)
    }));
    track(check("abs", &[kinky.clone()], rel_tol, |t, x| {
        weighted_sum(t, &x[0].abs(), &w6)
    }));
    track(check("elu", &[kinky.clone()], rel_tol, |t, x| {
        weighted_sum(t, &x[0].elu(), &w6)
    }));
    track(check("sigmoid", &[a23.clone()], rel_tol, |t, x| {
        weighted_sum(t, &x[0].sigmoid(), &w6)
    }));
    track(check("tanh", &[a23.clone()], rel_tol, |t, x| {
        weighted_sum(t, &x[0].tanh(), &w6)
    }));

    track(check("softmax_rows", &[a23.clone()], rel_tol, |t, x| {
        weighted_sum(t, &x[0].softmax_rows().unwrap(), &w6)
    }));
    let a34 = (vec![3usize, 4], vals(&mut r, 12));
    track(check("logsumexp_cols", &[a34.clone()], rel_tol, |t, x| {
        weighted_sum(t, &x[0].logsumexp_cols().unwrap(), &w3)
    }));

    let tgt = vals(&mut r, 6);
    track(check("mse", &[a23.clone()], rel_tol, |t, x| {
        let c = t.constant_matrix(2, 3, tgt.clone()).unwrap();
        x[0].mse(&c).unwrap()
    }));
    track(check("sum_all", &[a23.clone()], rel_tol, |_, x| {
        x[0].sum_all()
    }));
    track(check("mean_all", &[a23.clone()], rel_tol, |_, x| {
        x[0].mean_all()
    }));
    track(check("sum_cols", &[a23.clone()], rel_tol, |t, x| {
        weighted_sum(t, &x[0].sum_cols().unwrap(), &w6[..2])
    }));

    let a63 = (vec![6usize, 3], vals(&mut r, 18));
    track(check("pool_rows_grouped_mean", &[a63.clone()], rel_tol, |t, x| {
        weighted_sum(t, &x[0].pool_rows_grouped(3, true).unwrap(), &w6)
    }));
    track(check("pool_rows_grouped_sum", &[a63.clone()], rel_tol, |t, x| {
        weighted_sum(t, &x[0].pool_rows_grouped(3, false).unwrap(), &w6)
    }));

    let a43 = (vec![4usize, 3], vals(&mut r, 12));
    track(check("slice_rows", &[a43.clone()], rel_tol, |t, x| {
        weighted_sum(t, &x[0].slice_rows(1, 3).unwrap(), &w6)
    }));
    track(check("slice_cols", &[a34.clone()], rel_tol, |t, x| {
        weighted_sum(t, &x[0].slice_cols(1, 3).unwrap(), &w6)
    }));
    // Repeated indices exercise gradient accumulation into one source row.
    track(check("gather_rows", &[a43.clone()], rel_tol, |t, x| {
        weighted_sum(t, &x[0].gather_rows(&[2, 0, 2, 1, 2]).unwrap(), &w15)
    }));
    let a45 = (vec![4usize, 5], vals(&mut r, 20));
    track(check("select_col_per_row", &[a45.clone()], rel_tol, |t, x| {
        weighted_sum(t, &x[0].select_col_per_row(&[3, 0, 4, 1]).unwrap(), &w4)
    }));

    track(check(
        "rowwise_bmm",
        &[
            (vec![3usize, 2], vals(&mut r, 6)),
            (vec![3usize, 8], vals(&mut r, 24)),
        ],
        rel_tol,
        |t, x| weighted_sum(t, &x[0].rowwise_bmm(&x[1], 4).unwrap(), &w12),
    ));
    track(check("reshape", &[a23.clone()], rel_tol, |t, x| {
        weighted_sum(t, &x[0].reshape(3, 2).unwrap(), &w6)
    }));
    track(check("concat_rows", &[a23.clone(), b23.clone()], rel_tol, |t, x| {
        weighted_sum(t, &concat_rows(&[x[0].clone(), x[1].clone()]).unwrap(), &w12)
    }));
    track(check("concat_cols", &[a23.clone(), b23.clone()], rel_tol, |t, x| {
        weighted_sum(t, &concat_cols(&[x[0].clone(), x[1].clone()]).unwrap(), &w12)
    }));
    worst
}

/// Central differences through the full combined objective (attention
/// encoder, focusing gates, recurrent agents, monotone mixer conditioned
/// on the aggregate, both representation losses) on a two-agent batch with
/// one three-step and one shorter episode. Panics past `rel_tol`; returns
/// (worst deviation, parameters checked).
pub fn run_e2e_check(rel_tol: f64) -> (f64, usize) {
    let mut cfg = RunConfig::default();
    cfg.env = "hallway-3x4".into();
    cfg.algo = Algo::Masia;
    cfg.mixer = MixerKind::Qmix;
    cfg.model.integration = Integration::Gru;
    cfg.model.d_qk = 4;
    cfg.model.attn_dim = 8;
    cfg.model.agg_hidden = 4;
    cfg.model.obs_embed = 8;
    cfg.model.agent_hidden = 8;
    cfg.model.focus_hidden = 8;
    cfg.model.decoder_hidden = 8;
    cfg.model.latent_hidden = 8;
    cfg.model.action_embed = 3;
    cfg.model.rollout_k = 2;
    cfg.model.mixing_hidden = 4;
    cfg.model.mixer_condition_on_z = true;

    let mut env = make_env(&cfg.env, 5, cfg.sight).unwrap();
    let model = Model::new(cfg.clone(), env.descriptor().clone());
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // Random-policy episodes, truncated to three steps.
    let mut eps = Vec::new();
    for cap in [3usize, 2] {
        let mut e = rollout_episode(&model, env.as_mut(), &mut rng, 1.0).unwrap();
        e.obs.truncate(cap);
        e.states.truncate(cap);
        e.actions.truncate(cap);
        e.rewards.truncate(cap);
        e.active.truncate(cap);
        eps.push(e);
    }
    let refs: Vec<&_> = eps.iter().collect();
    let batch = EpisodeBatch::build(&refs, &model.desc);
    assert_eq!(batch.max_len(), 3);

    // Bootstrap values frozen at the base parameters: the TD objective is
    // semi-gradient, so its finite-difference oracle must hold these fixed.
    let ys: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let paths = build_paths(&tape, &model, &batch, false).unwrap();
        let target = scan_q(&tape, &model, &batch, &paths, Side::Target, None).unwrap();
        target.q_tot.iter().map(|v| v.value_vec()).collect()
    };

    let loss = || {
        let tape = Tape::new();
        let paths = build_paths(&tape, &model, &batch, false).unwrap();
        let online = scan_q(
            &tape,
            &model,
            &batch,
            &paths,
            Side::Online,
            Some(&batch.actions),
        )
        .unwrap();
        let y_consts: Vec<Var> = ys
            .iter()
            .map(|v| tape.constant_matrix(v.len(), 1, v.clone()).unwrap())
            .collect();
        let l_rl = td_loss(&tape, &batch, cfg.loss.gamma, &online.q_tot, &y_consts).unwrap();
        let l_ae = reconstruction_loss(
            &tape,
            model.decoder.as_ref().unwrap(),
            &paths.zs_online,
            &batch.states,
            batch.state_dim,
        )
        .unwrap();
        let l_m = rollout_loss(
            &tape,
            model.latent.as_ref().unwrap(),
            &cfg.model,
            batch.n_agents,
            &paths.zs_online,
            &paths.zs_target,
            &batch.actions,
            cfg.model.rollout_k,
        )
        .unwrap();
        l_rl.add(&l_ae.scale(cfg.loss.lambda1))
            .unwrap()
            .add(&l_m.scale(cfg.loss.lambda2))
            .unwrap()
    };

    let groups = model.online_groups();
    for g in &groups {
        g.zero_grads();
    }
    let y = loss();
    assert!(y.item().is_finite());
    y.backward().unwrap();

    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for g in &groups {
        for (pname, p) in g.iter() {
            let analytic: Vec<f64> = {
                let t = p.borrow();
                t.grad()
                    .map(|v| v.to_vec())
                    .unwrap_or_else(|| vec![0.0; t.data().len()])
            };
            let n = p.borrow().data().len();
            for i in 0..n {
                let x0 = p.borrow().data()[i];
                p.borrow_mut().data_mut()[i] = x0 + H;
                let fp = loss().item();
                p.borrow_mut().data_mut()[i] = x0 - H;
                let fm = loss().item();
                p.borrow_mut().data_mut()[i] = x0;
                let numeric = (fp - fm) / (2.0 * H);
                let ana = analytic[i];
                let dev = deviation(ana, numeric, 1e-3);
                assert!(
                    dev <= rel_tol,
                    "{}/{pname}[{i}]: analytic {ana} vs numeric {numeric}",
                    g.name()
                );
                worst = worst.max(dev);
                checked += 1;
            }
        }
    }
    (worst, checked)
}

/// Permutation properties of the aggregation encoder over `n_perms`
/// random agent orderings: pooled integrations must be invariant, the
/// recurrent integration block-equivariant. Returns the max abs deviation.
pub fn run_permutation_checks(n_perms: usize) -> f64 {
    let (n, od) = (5usize, 7usize);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst = 0.0f64;

    for variant in [Integration::Mean, Integration::Sum, Integration::Gru] {
        let cfg = ModelConfig {
            integration: variant,
            ..ModelConfig::default()
        };
        let enc = init_encoder(&mut rng, &cfg, od);
        let block = match variant {
            Integration::Gru => cfg.agg_hidden,
            _ => 0,
        };
        for _ in 0..n_perms {
            let data = vals(&mut rng, n * od);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let permuted: Vec<f64> = perm
                .iter()
                .flat_map(|&src| data[src * od..(src + 1) * od].to_vec())
                .collect();

            let tape = Tape::new();
            let obs = tape.constant_matrix(n, od, data.clone()).unwrap();
            let obs_p = tape.constant_matrix(n, od, permuted).unwrap();
            let z = encode(&tape, &enc, &cfg, n, &obs).unwrap().value_vec();
            let zp = encode(&tape, &enc, &cfg, n, &obs_p).unwrap().value_vec();

            match variant {
                Integration::Mean | Integration::Sum => {
                    for (a, b) in z.iter().zip(&zp) {
                        worst = worst.max((a - b).abs());
                    }
                }
                Integration::Gru => {
                    // Row i of the permuted input is source agent perm[i],
                    // so block i of zp must equal block perm[i] of z.
                    for (i, &src) in perm.iter().enumerate() {
                        for d in 0..block {
                            worst = worst.max((zp[i * block + d] - z[src * block + d]).abs());
                        }
                    }
                }
            }
        }
    }
    worst
}

/// Monotonicity sweep of the state-conditioned mixer: on `n_draws` random
/// (state, params, q) draws, bumping any single agent value by +0.1 must
/// never decrease the mixed total. Returns the most negative observed
/// change (0 if every change was nonnegative).
pub fn run_monotonicity_checks(n_draws: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst_drop = 0.0f64;
    for _ in 0..n_draws {
        let n = rng.gen_range(2..=5);
        let state_in = rng.gen_range(1..=8);
        let hidden = rng.gen_range(1..=8);
        let cfg = ModelConfig {
            mixing_hidden: hidden,
            ..ModelConfig::default()
        };
        let mixer = init_qmix(&mut rng, &cfg, n, state_in);
        let state: Vec<f64> = (0..state_in).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();

        let tape = Tape::new();
        let s = tape.constant_matrix(1, state_in, state.clone()).unwrap();
        let base = {
            let qv = tape.constant_matrix(1, n, q.clone()).unwrap();
            qmix_mix(&tape, &mixer, &qv, &s, hidden).unwrap().item()
        };
        for i in 0..n {
            let mut bumped = q.clone();
            bumped[i] += 0.1;
            let qv = tape.constant_matrix(1, n, bumped).unwrap();
            let tot = qmix_mix(&tape, &mixer, &qv, &s, hidden).unwrap().item();
            worst_drop = worst_drop.min(tot - base);
        }
    }
    worst_drop
}

// ---------------------------------------------------------------------
// Loss-oracle instances. Weights and inputs come from a deterministic
// value sequence mirrored by tools/oracles/losses.py, which derives the
// frozen expected values independently in plain Python.

/// Deterministic sequence in [-0.25, 0.25], period 11.
pub struct ValStream(usize);

impl ValStream {
    pub fn new() -> Self {
        ValStream(0)
    }
    pub fn next_val(&mut self) -> f64 {
        let v = 0.05 * (((7 * self.0) % 11) as f64 - 5.0);
        self.0 += 1;
        v
    }
    pub fn take(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_val()).collect()
    }
}

pub fn overwrite(group: &ParamGroup, name: &str, vals: &[f64]) {
    let p = group.get(name).unwrap();
    let mut t = p.borrow_mut();
    assert_eq!(t.data().len(), vals.len(), "{name}: shape drifted");
    t.data_mut().copy_from_slice(vals);
}

/// (name, computed, frozen oracle value) for the reconstruction loss, the
/// K=1 and K=2 rollout losses, and the TD loss on their fixed instances.
pub fn loss_oracle_cases() -> Vec<(&'static str, f64, f64)> {
    use masia_core::masia::{init_decoder, init_latent};
    use masia_core::rng::{derive, Stream};

    let mut out = Vec::new();

    // Reconstruction: decoder 2 -> 3 -> 2, steps with 2 then 1 episodes.
    {
        let mut g = ValStream::new();
        let cfg = ModelConfig {
            decoder_hidden: 3,
            ..ModelConfig::default()
        };
        let mut rng = derive(0, Stream::Init, 0);
        let dec = init_decoder(&mut rng, &cfg, 2, 2);
        overwrite(&dec, "dec.l1.w", &g.take(6));
        overwrite(&dec, "dec.l1.b", &g.take(3));
        overwrite(&dec, "dec.l2.w", &g.take(6));
        overwrite(&dec, "dec.l2.b", &g.take(2));
        let tape = Tape::new();
        let z0 = tape.constant_matrix(2, 2, g.take(4)).unwrap();
        let z1 = tape.constant_matrix(1, 2, g.take(2)).unwrap();
        let states = vec![g.take(4), g.take(2)];
        let loss = reconstruction_loss(&tape, &dec, &[z0, z1], &states, 2)
            .unwrap()
            .item();
        out.push(("L_ae", loss, 4.20025677083333410e-02));
    }

    // Rollout: 2 agents, 3 actions, embed 2, d_z 2, hidden 3, residual.
    for (k_steps, expect) in [(1usize, 2.37257135416666584e-02), (2, 1.90716602578125005e-01)] {
        let mut g = ValStream::new();
        let cfg = ModelConfig {
            action_embed: 2,
            latent_hidden: 3,
            residual_latent: true,
            ..ModelConfig::default()
        };
        let mut rng = derive(0, Stream::Init, 0);
        let lat = init_latent(&mut rng, &cfg, 2, 3, 2);
        overwrite(&lat, "embed", &g.take(6));
        overwrite(&lat, "dyn.l1.w", &g.take(18));
        overwrite(&lat, "dyn.l1.b", &g.take(3));
        overwrite(&lat, "dyn.l2.w", &g.take(6));
        overwrite(&lat, "dyn.l2.b", &g.take(2));
        let tape = Tape::new();
        let zs: Vec<Var> = [(2usize, 4usize), (2, 4), (1, 2)]
            .iter()
            .map(|&(rows, n)| tape.constant_matrix(rows, 2, g.take(n)).unwrap())
            .collect();
        let zt: Vec<Var> = [(2usize, 4usize), (2, 4), (1, 2)]
            .iter()
            .map(|&(rows, n)| tape.constant_matrix(rows, 2, g.take(n)).unwrap())
            .collect();
        let actions = vec![vec![0, 2, 1, 1], vec![2, 0, 0, 1], vec![1, 2]];
        let loss = rollout_loss(&tape, &lat, &cfg, 2, &zs, &zt, &actions, k_steps)
            .unwrap()
            .item();
        let name: &'static str = if k_steps == 1 { "L_m(K=1)" } else { "L_m(K=2)" };
        out.push((name, loss, expect));
    }

    // TD: two episodes (lengths 3 and 2), gamma 0.9, hand-set q values;
    // closed form ((0.15^2 + 1.06^2) + (0.59^2 + 0.4^2) + 0.3^2)/5.
    {
        let batch = EpisodeBatch {
            n_agents: 2,
            obs_dim: 1,
            state_dim: 1,
            alive: vec![2, 2, 1],
            obs: vec![vec![], vec![], vec![]],
            obs_id: vec![vec![], vec![], vec![]],
            states: vec![vec![], vec![], vec![]],
            actions: vec![vec![], vec![], vec![]],
            rewards: vec![vec![0.1, 0.3], vec![-0.2, 0.5], vec![1.0]],
        };
        let tape = Tape::new();
        let mk = |rows: usize, v: Vec<f64>| tape.constant_matrix(rows, 1, v).unwrap();
        let q_online = vec![
            mk(2, vec![0.7, -0.4]),
            mk(2, vec![0.2, 0.9]),
            mk(1, vec![1.3]),
        ];
        let q_target = vec![
            mk(2, vec![0.6, -0.2]),
            mk(2, vec![0.5, 0.4]),
            mk(1, vec![1.1]),
        ];
        let loss = td_loss(&tape, &batch, 0.9, &q_online, &q_target)
            .unwrap()
            .item();
        out.push(("L_rl", loss, 3.48840000000000094e-01));
    }
    out
}
