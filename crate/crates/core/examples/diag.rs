//! Scratch diagnostic: inspect a trained offline model's Q-values along a
//! winning dataset trajectory and trace its greedy rollout.
//!
//! Usage: diag <run_dir> <dataset.jsonl>

use masia_core::diffcore::Tape;
use masia_core::envs::make_env;
use masia_core::offline::read_dataset;
use masia_core::qlearn::{build_paths, scan_q, EpisodeBatch, Side};
use masia_core::rng::{derive, Stream};
use masia_core::train::{load_run_model, rollout_episode};

fn positions(state: &[f64], lengths: &[usize]) -> Vec<usize> {
    // Hallway state: per-agent one-hot blocks; bit k set = position k+1,
    // all-zero = at the goal (0).
    let mut out = Vec::new();
    let mut off = 0;
    for &len in lengths {
        let block = &state[off..off + len];
        let pos = block
            .iter()
            .position(|&x| x == 1.0)
            .map(|k| k + 1)
            .unwrap_or(0);
        out.push(pos);
        off += len;
    }
    out
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let run_dir = std::path::Path::new(&args[1]);
    let ds_path = std::path::Path::new(&args[2]);
    let lengths = [4usize, 6, 10];

    let model = load_run_model(run_dir, "final.ckpt").unwrap();
    let ds = read_dataset(ds_path).unwrap();

    // A winning episode from the data.
    let win_idx = ds
        .episodes
        .iter()
        .position(|e| e.rewards.iter().sum::<f64>() > 0.5)
        .expect("dataset has a winning episode");
    let ep = &ds.episodes[win_idx];
    println!(
        "winning episode #{win_idx}: len {}, return {}",
        ep.len(),
        ep.rewards.iter().sum::<f64>()
    );

    let refs = vec![&ds.episodes[win_idx]];
    let batch = EpisodeBatch::build(&refs, &model.desc);
    let tape = Tape::new();
    let paths = build_paths(&tape, &model, &batch, false).unwrap();
    let greedy = scan_q(&tape, &model, &batch, &paths, Side::Online, None).unwrap();
    let at_data = scan_q(
        &tape,
        &model,
        &batch,
        &paths,
        Side::Online,
        Some(&batch.actions),
    )
    .unwrap();

    let n = model.desc.n_agents;
    let na = model.desc.n_actions;
    for t in 0..batch.max_len() {
        let q = greedy.q[t].value_vec();
        let pos = positions(&batch.states[t], &lengths);
        let mut qstr = String::new();
        for i in 0..n {
            let row: Vec<String> = (0..na)
                .map(|a| format!("{:+.3}", q[i * na + a]))
                .collect();
            qstr.push_str(&format!(" a{i}[{}]", row.join(" ")));
        }
        println!(
            "t{t:2} pos{pos:?} r={:+.2} data_a={:?} qtot_data={:+.4} qtot_greedy={:+.4}{qstr}",
            batch.rewards[t][0],
            batch.actions[t],
            at_data.q_tot[t].value_vec()[0],
            greedy.q_tot[t].value_vec()[0],
        );
    }

    // Greedy rollout traces in the real environment.
    println!("\ngreedy rollouts:");
    for k in 0..3 {
        let mut env = make_env("hallway-4x6x10", 9000 + k, 1).unwrap();
        let mut rng = derive(9000 + k, Stream::Explore, 0);
        let rec = rollout_episode(&model, env.as_mut(), &mut rng, 0.0).unwrap();
        println!(
            "rollout {k}: len {} won {} return {}",
            rec.len(),
            rec.won,
            rec.rewards.iter().sum::<f64>()
        );
        for t in 0..rec.len() {
            println!(
                "  t{t:2} pos{:?} act{:?} r={:+.2}",
                positions(&rec.states[t], &lengths),
                rec.actions[t],
                rec.rewards[t]
            );
        }
    }
}
