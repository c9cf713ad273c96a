//! Benchmarks for the pieces that dominate training wall time: tape ops,
//! environment stepping, and a full gradient update on a realistic batch.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use masia_core::config::RunConfig;
use masia_core::diffcore::Tape;
use masia_core::envs::make_env;
use masia_core::qlearn::{combined_update, make_adam, EpisodeBatch, EpisodeRecord, Model};
use masia_core::rng::{derive, Stream};
use masia_core::train::rollout_episode;

fn bench_tape_ops(c: &mut Criterion) {
    let mut rng: ChaCha8Rng = derive(7, Stream::Init, 0);
    let a_data: Vec<f64> = (0..64 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b_data: Vec<f64> = (0..64 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect();

    c.bench_function("matmul_64x64_forward_backward", |bch| {
        bch.iter(|| {
            let tape = Tape::new();
            let a = tape.constant_matrix(64, 64, a_data.clone()).unwrap();
            let b = tape.constant_matrix(64, 64, b_data.clone()).unwrap();
            let y = a.matmul(&b).unwrap().relu().mean_all();
            y.backward().unwrap();
            y.item()
        })
    });
}

fn bench_env_step(c: &mut Criterion) {
    c.bench_function("hallway_4x6x10_episode", |bch| {
        bch.iter(|| {
            let mut env = make_env("hallway-4x6x10", 3, 1).unwrap();
            let mut rng: ChaCha8Rng = derive(3, Stream::Env, 9);
            let mut step = env.reset();
            let n = env.descriptor().n_agents;
            let k = env.descriptor().n_actions;
            while !step.done {
                let acts: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
                step = env.step(&acts).unwrap();
            }
            step.reward
        })
    });
}

fn bench_update(c: &mut Criterion) {
    let cfg = RunConfig {
        env: "hallway-4x6x10".into(),
        ..RunConfig::default()
    };
    let mut env = make_env(&cfg.env, 5, cfg.sight).unwrap();
    let model = Model::new(cfg.clone(), env.descriptor().clone());
    let mut rng: ChaCha8Rng = derive(5, Stream::Collect, 0);
    let episodes: Vec<EpisodeRecord> = (0..8)
        .map(|_| rollout_episode(&model, env.as_mut(), &mut rng, 1.0).unwrap())
        .collect();
    let refs: Vec<&EpisodeRecord> = episodes.iter().collect();
    let batch = EpisodeBatch::build(&refs, &model.desc);
    let mut opt = make_adam(&cfg.optim);

    c.bench_function("combined_update_8_episodes", |bch| {
        bch.iter(|| combined_update(&model, &mut opt, &batch, 100_000).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_tape_ops, bench_env_step, bench_update
}
criterion_main!(benches);
