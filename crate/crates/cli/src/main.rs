//! Command-line driver: online/offline training, dataset collection,
//! policy evaluation, dataset validation, and cross-seed reporting.
//!
//! Configuration layers in order: built-in defaults, then a TOML file
//! passed with `--config`, then individual flags. The fully resolved
//! configuration is written next to every run's artifacts as
//! `config.json`.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use masia_core::config::{Algo, Integration, MixerKind, Regularizer, RunConfig};
use masia_core::offline::{
    collect_expert, collect_noisy, collect_replay, nongreedy_fraction, train_offline,
    validate_file, write_dataset,
};
use masia_core::stats::{bootstrap_ci_median, median};
use masia_core::train::{evaluate, load_run_model, read_metrics, train_online};

#[derive(Parser)]
#[command(
    name = "masia",
    version,
    about = "Cooperative multi-agent Q-learning with self-supervised message aggregation"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train online with environment interaction.
    Train(TrainCmd),
    /// Train on a fixed dataset (representation pre-training, then joint).
    TrainOffline(TrainOfflineCmd),
    /// Roll a trained policy into a dataset file.
    Collect(CollectCmd),
    /// Evaluate a saved checkpoint greedily.
    Eval(EvalCmd),
    /// Check a dataset file: format, dimensions, and byte-stable rewrite.
    ValidateDataset(ValidateCmd),
    /// Aggregate run directories into a CSV with medians and a bootstrap CI.
    Report(ReportCmd),
}

/// Flags shared by both trainers. Every flag overrides the corresponding
/// field of the layered configuration.
#[derive(Args)]
struct ConfigArgs {
    /// TOML file applied over built-in defaults (flags still win).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Environment name, e.g. `hallway-4x6x10`, `lbf-11x11-6p-4f`, `tj-easy`.
    #[arg(long)]
    env: Option<String>,
    /// `masia`, `nocomm`, or `fullcomm`.
    #[arg(long, value_parser = parse_algo)]
    algo: Option<Algo>,
    /// `vdn` or `qmix`.
    #[arg(long, value_parser = parse_mixer)]
    mixer: Option<MixerKind>,
    /// Aggregation of attended messages: `gru`, `mean`, or `sum`.
    #[arg(long, value_parser = parse_integration)]
    integration: Option<Integration>,
    /// Environment steps (online) to train for.
    #[arg(long)]
    steps: Option<u64>,
    /// Sight range for environments that support it (traffic junction).
    #[arg(long)]
    sight: Option<i32>,
    /// Weight of the state reconstruction loss.
    #[arg(long)]
    lambda1: Option<f64>,
    /// Weight of the multi-step latent rollout loss.
    #[arg(long)]
    lambda2: Option<f64>,
    /// Latent rollout horizon K.
    #[arg(long)]
    rollout_k: Option<usize>,
    /// Condition the QMIX hypernetwork on the aggregated message too.
    #[arg(long)]
    mixer_condition_on_z: Option<bool>,
    /// Environment steps during which TD gradients do not reach the encoder.
    #[arg(long)]
    warmup_steps: Option<u64>,
    /// Evaluation cadence in environment steps (0: environment default).
    #[arg(long)]
    eval_interval: Option<u64>,
    /// Episodes per evaluation (0: environment default).
    #[arg(long)]
    eval_episodes: Option<usize>,
    /// Stop after this test win rate holds for consecutive evaluations.
    #[arg(long)]
    stop_when_win_rate: Option<f64>,
    /// Consecutive evaluations required by --stop-when-win-rate.
    #[arg(long)]
    stop_consecutive_evals: Option<u32>,
    /// Save a numbered checkpoint every N evaluations (0: only final).
    #[arg(long)]
    checkpoint_every_evals: Option<u32>,
    /// Offline stage-one (representation only) gradient steps.
    #[arg(long)]
    pretrain_steps: Option<u64>,
    /// Offline stage-two (joint objective) gradient steps.
    #[arg(long)]
    joint_steps: Option<u64>,
    /// Offline TD regularizer: `conservative` or `none`.
    #[arg(long, value_parser = parse_regularizer)]
    regularizer: Option<Regularizer>,
    /// Conservative value-pushdown weight.
    #[arg(long)]
    beta: Option<f64>,
}

fn parse_algo(s: &str) -> Result<Algo, String> {
    match s {
        "masia" => Ok(Algo::Masia),
        "nocomm" => Ok(Algo::Nocomm),
        "fullcomm" => Ok(Algo::Fullcomm),
        _ => Err(format!("unknown algo `{s}` (masia, nocomm, fullcomm)")),
    }
}

fn parse_mixer(s: &str) -> Result<MixerKind, String> {
    match s {
        "vdn" => Ok(MixerKind::Vdn),
        "qmix" => Ok(MixerKind::Qmix),
        _ => Err(format!("unknown mixer `{s}` (vdn, qmix)")),
    }
}

fn parse_integration(s: &str) -> Result<Integration, String> {
    match s {
        "gru" => Ok(Integration::Gru),
        "mean" => Ok(Integration::Mean),
        "sum" => Ok(Integration::Sum),
        _ => Err(format!("unknown integration `{s}` (gru, mean, sum)")),
    }
}

fn parse_regularizer(s: &str) -> Result<Regularizer, String> {
    match s {
        "conservative" => Ok(Regularizer::Conservative),
        "none" => Ok(Regularizer::None),
        _ => Err(format!("unknown regularizer `{s}` (conservative, none)")),
    }
}

impl ConfigArgs {
    fn resolve(&self, seed: u64) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<RunConfig>(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        cfg.seed = seed;
        if let Some(v) = &self.env {
            cfg.env = v.clone();
        }
        if let Some(v) = self.algo {
            cfg.algo = v;
        }
        if let Some(v) = self.mixer {
            cfg.mixer = v;
        }
        if let Some(v) = self.integration {
            cfg.model.integration = v;
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.sight {
            cfg.sight = v;
        }
        if let Some(v) = self.lambda1 {
            cfg.loss.lambda1 = v;
        }
        if let Some(v) = self.lambda2 {
            cfg.loss.lambda2 = v;
        }
        if let Some(v) = self.rollout_k {
            cfg.model.rollout_k = v;
        }
        if let Some(v) = self.mixer_condition_on_z {
            cfg.model.mixer_condition_on_z = v;
        }
        if let Some(v) = self.warmup_steps {
            cfg.loss.warmup_steps = v;
        }
        if let Some(v) = self.eval_interval {
            cfg.train.eval_interval = v;
        }
        if let Some(v) = self.eval_episodes {
            cfg.train.eval_episodes = v;
        }
        if let Some(v) = self.stop_when_win_rate {
            cfg.train.stop_when_win_rate = v;
        }
        if let Some(v) = self.stop_consecutive_evals {
            cfg.train.stop_consecutive_evals = v;
        }
        if let Some(v) = self.checkpoint_every_evals {
            cfg.train.checkpoint_every_evals = v;
        }
        if let Some(v) = self.pretrain_steps {
            cfg.offline.pretrain_steps = v;
        }
        if let Some(v) = self.joint_steps {
            cfg.offline.joint_steps = v;
        }
        if let Some(v) = self.regularizer {
            cfg.offline.regularizer = v;
        }
        if let Some(v) = self.beta {
            cfg.offline.beta = v;
        }
        Ok(cfg)
    }
}

fn parse_seeds(seeds: &str) -> Result<Vec<u64>> {
    let out: Vec<u64> = seeds
        .split(',')
        .map(|s| s.trim().parse::<u64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("parsing seed list `{seeds}`"))?;
    if out.is_empty() {
        bail!("empty seed list");
    }
    Ok(out)
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Comma-separated seeds, run sequentially into `<out>/seed<k>/`.
    #[arg(long, default_value = "0")]
    seeds: String,
    /// Parent directory for run artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Print evaluation rows as they happen.
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct TrainOfflineCmd {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset file produced by `collect`.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "0")]
    seeds: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    verbose: bool,
}

#[derive(Args)]
struct CollectCmd {
    /// Training run directory holding config.json and checkpoints.
    #[arg(long)]
    run: PathBuf,
    /// `expert`, `noisy`, `replay-good`, `replay-medium`, or `replay-poor`.
    #[arg(long)]
    scheme: String,
    #[arg(long, default_value_t = 2000)]
    episodes: usize,
    /// Generator seed (environment and exploration randomness).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint file inside the run directory (expert/noisy schemes).
    #[arg(long, default_value = "final.ckpt")]
    ckpt: String,
    /// Output file (default `<run>/datasets/<scheme>-<episodes>.jsonl`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value = "final.ckpt")]
    ckpt: String,
    /// Episodes to evaluate (0: environment default).
    #[arg(long, default_value_t = 0)]
    episodes: usize,
    /// Evaluation stream ordinal; keep distinct from training ordinals.
    #[arg(long, default_value_t = 1_000_000)]
    ordinal: u64,
}

#[derive(Args)]
struct ValidateCmd {
    /// Dataset files to check.
    files: Vec<PathBuf>,
}

#[derive(Args)]
struct ReportCmd {
    /// Run directories, or parents whose children are run directories.
    dirs: Vec<PathBuf>,
    /// Also report the first step at which test win rate reached this value.
    #[arg(long)]
    crossing: Option<f64>,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train(c) => cmd_train(c),
        Cmd::TrainOffline(c) => cmd_train_offline(c),
        Cmd::Collect(c) => cmd_collect(c),
        Cmd::Eval(c) => cmd_eval(c),
        Cmd::ValidateDataset(c) => cmd_validate(c),
        Cmd::Report(c) => cmd_report(c),
    }
}

fn cmd_train(c: TrainCmd) -> Result<()> {
    for seed in parse_seeds(&c.seeds)? {
        let cfg = c.cfg.resolve(seed)?;
        let dir = c.out.join(format!("seed{seed}"));
        let s = train_online(&cfg, &dir, c.verbose)
            .with_context(|| format!("training seed {seed}"))?;
        println!("{}", serde_json::to_string(&s)?);
    }
    Ok(())
}

fn cmd_train_offline(c: TrainOfflineCmd) -> Result<()> {
    for seed in parse_seeds(&c.seeds)? {
        let cfg = c.cfg.resolve(seed)?;
        let dir = c.out.join(format!("seed{seed}"));
        let s = train_offline(&cfg, &c.dataset, &dir, c.verbose)
            .with_context(|| format!("offline training seed {seed}"))?;
        println!("{}", serde_json::to_string(&s)?);
    }
    Ok(())
}

fn cmd_collect(c: CollectCmd) -> Result<()> {
    let cfg_text = fs::read_to_string(c.run.join("config.json"))
        .with_context(|| format!("reading {}/config.json", c.run.display()))?;
    let cfg: RunConfig = serde_json::from_str(&cfg_text)?;

    let ds = match c.scheme.as_str() {
        "expert" | "noisy" => {
            let model = load_run_model(&c.run, &c.ckpt)?;
            if c.scheme == "expert" {
                collect_expert(&model, &cfg, c.episodes, c.seed)?
            } else {
                let ds = collect_noisy(&model, &cfg, c.episodes, c.seed)?;
                let frac = nongreedy_fraction(&model, &ds)?;
                eprintln!("non-greedy action fraction: {frac:.4}");
                ds
            }
        }
        s if s.starts_with("replay-") => {
            let (ds, _labels) = collect_replay(&c.run, &cfg, s, c.episodes, c.seed)?;
            ds
        }
        other => bail!("unknown scheme `{other}`"),
    };

    let out = match c.out {
        Some(p) => p,
        None => {
            let dir = c.run.join("datasets");
            fs::create_dir_all(&dir)?;
            dir.join(format!("{}-{}.jsonl", c.scheme, c.episodes))
        }
    };
    write_dataset(&out, &ds)?;
    let report = validate_file(&out)?;
    println!(
        "{}",
        serde_json::json!({
            "path": out.display().to_string(),
            "episodes": report.episodes,
            "steps": report.steps,
            "mean_return": report.mean_return,
            "win_rate": report.win_rate,
        })
    );
    Ok(())
}

fn cmd_eval(c: EvalCmd) -> Result<()> {
    let cfg_text = fs::read_to_string(c.run.join("config.json"))?;
    let cfg: RunConfig = serde_json::from_str(&cfg_text)?;
    let model = load_run_model(&c.run, &c.ckpt)?;
    let episodes = if c.episodes > 0 {
        c.episodes
    } else {
        model.desc.eval_episodes
    };
    let r = evaluate(&model, &cfg.env, cfg.sight, cfg.seed, c.ordinal, episodes)?;
    println!(
        "{}",
        serde_json::json!({
            "env": cfg.env,
            "ckpt": c.ckpt,
            "episodes": episodes,
            "win_rate": r.win_rate,
            "mean_return": r.mean_return,
        })
    );
    Ok(())
}

fn cmd_validate(c: ValidateCmd) -> Result<()> {
    if c.files.is_empty() {
        bail!("no dataset files given");
    }
    for f in &c.files {
        let report = validate_file(f).with_context(|| format!("validating {}", f.display()))?;
        println!(
            "{}",
            serde_json::json!({
                "path": f.display().to_string(),
                "episodes": report.episodes,
                "steps": report.steps,
                "mean_return": report.mean_return,
                "win_rate": report.win_rate,
            })
        );
    }
    Ok(())
}

/// A run directory is any directory containing summary.json; parents are
/// expanded one level so `report runs/experiment` covers all its seeds.
fn find_runs(dirs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut runs = Vec::new();
    for d in dirs {
        if d.join("summary.json").exists() {
            runs.push(d.clone());
            continue;
        }
        let mut children: Vec<PathBuf> = fs::read_dir(d)
            .with_context(|| format!("reading {}", d.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("summary.json").exists())
            .collect();
        children.sort();
        runs.extend(children);
    }
    if runs.is_empty() {
        bail!("no run directories (summary.json) found");
    }
    Ok(runs)
}

fn cmd_report(c: ReportCmd) -> Result<()> {
    let runs = find_runs(&c.dirs)?;
    let mut finals = Vec::new();
    let mut crossings = Vec::new();

    let mut header = "run,env,algo,mixer,seed,final_win_rate,last_win_rate,wall_seconds".to_string();
    if c.crossing.is_some() {
        header.push_str(",crossing_step");
    }
    println!("{header}");

    for run in &runs {
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(run.join("summary.json"))?)?;
        let cfg: RunConfig = serde_json::from_str(&fs::read_to_string(run.join("config.json"))?)?;
        let get = |k: &str| summary.get(k).and_then(|v| v.as_f64()).unwrap_or(f64::NAN);
        let final_wr = get("final_win_rate");
        finals.push(final_wr);

        let mut line = format!(
            "{},{},{:?},{:?},{},{:.4},{:.4},{:.1}",
            run.display(),
            cfg.env,
            cfg.algo,
            cfg.mixer,
            cfg.seed,
            final_wr,
            get("last_win_rate"),
            get("wall_seconds"),
        );
        if let Some(thr) = c.crossing {
            let rows = read_metrics(&run.join("metrics.jsonl"))?;
            let cross = rows
                .iter()
                .find(|r| r.test_win_rate >= thr)
                .map(|r| r.env_step);
            crossings.push(cross.map(|s| s as f64).unwrap_or(f64::INFINITY));
            match cross {
                Some(s) => line.push_str(&format!(",{s}")),
                None => line.push_str(",never"),
            }
        }
        println!("{line}");
    }

    let (lo, hi) = bootstrap_ci_median(&finals, 10_000, 0);
    println!(
        "# final_win_rate median {:.4}, bootstrap 95% CI [{:.4}, {:.4}], n {}",
        median(&finals),
        lo,
        hi,
        finals.len()
    );
    if c.crossing.is_some() {
        let med = median(&crossings);
        if med.is_finite() {
            println!("# crossing_step median {med:.0}");
        } else {
            println!("# crossing_step median never");
        }
    }
    Ok(())
}
