//! Run configuration shared by the trainers and the CLI.
//!
//! Every struct carries serde defaults and rejects unknown keys, so a
//! config file with a typo fails loudly instead of silently training with
//! defaults.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    /// Attention aggregation with per-agent focusing and both
    /// representation losses.
    Masia,
    /// Communication disabled: the aggregate fed to each agent is zeros.
    Nocomm,
    /// Flat concatenation of all raw observations fed to each agent.
    Fullcomm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerKind {
    Vdn,
    Qmix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integration {
    /// Shared GRU scanned across agent rows; output blocks keep agent order.
    Gru,
    /// Mean over attention rows (permutation invariant).
    Mean,
    /// Sum over attention rows (permutation invariant).
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    /// Decomposed-max TD plus a pushdown penalty on out-of-data action
    /// values (weight `beta`), keeping the greedy policy near the data.
    Conservative,
    /// Plain decomposed-max TD, no behavior regularization.
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub integration: Integration,
    /// Attention query/key width.
    pub d_qk: usize,
    /// Attention value width (row width of the aggregated matrix).
    pub attn_dim: usize,
    /// Hidden width of the integration GRU; the aggregate is
    /// `n_agents * agg_hidden` wide under GRU integration.
    pub agg_hidden: usize,
    /// Observation embedding width in the per-agent Q network.
    pub obs_embed: usize,
    /// Recurrent width of the per-agent Q network.
    pub agent_hidden: usize,
    /// Hidden width of the per-agent focusing MLPs.
    pub focus_hidden: usize,
    /// Hidden width of the state-reconstruction decoder.
    pub decoder_hidden: usize,
    /// Hidden width of the latent transition model.
    pub latent_hidden: usize,
    /// Per-agent action embedding width in the latent model.
    pub action_embed: usize,
    /// Latent rollout horizon K.
    pub rollout_k: usize,
    /// Latent model predicts a residual added to the current aggregate.
    pub residual_latent: bool,
    /// QMIX mixing layer width.
    pub mixing_hidden: usize,
    /// Additionally condition the QMIX hypernetwork on the aggregate.
    pub mixer_condition_on_z: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            integration: Integration::Gru,
            d_qk: 16,
            attn_dim: 32,
            agg_hidden: 8,
            obs_embed: 32,
            agent_hidden: 64,
            focus_hidden: 32,
            decoder_hidden: 64,
            latent_hidden: 64,
            action_embed: 8,
            rollout_k: 2,
            residual_latent: true,
            mixing_hidden: 32,
            mixer_condition_on_z: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the state-reconstruction loss.
    pub lambda1: f64,
    /// Weight of the latent rollout loss.
    pub lambda2: f64,
    pub gamma: f64,
    /// While `env_step < warmup_steps`, the TD gradient is blocked from the
    /// encoder (the aggregate is detached before focusing) so the
    /// representation is shaped by the two auxiliary losses alone. Ignored
    /// when both lambdas are zero, since there would be nothing training
    /// the encoder at all.
    pub warmup_steps: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            gamma: 0.99,
            warmup_steps: 50_000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Joint global-norm clip over all trainable groups.
    pub clip_norm: f64,
    /// EMA coefficient for both target networks.
    pub tau: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 10.0,
            tau: 0.005,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Episodes per gradient step.
    pub batch: usize,
    /// Replay capacity in episodes (FIFO).
    pub buffer_episodes: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Environment steps over which epsilon anneals linearly.
    pub eps_anneal_steps: u64,
    /// Environment steps between greedy evaluations; 0 uses the
    /// environment's convention.
    pub eval_interval: u64,
    /// Episodes per evaluation; 0 uses the environment's convention.
    pub eval_episodes: usize,
    /// Save a numbered checkpoint every this many evaluations; 0 saves
    /// only the final one.
    pub checkpoint_every_evals: u32,
    /// End the run early once the eval win rate has reached this level for
    /// `stop_consecutive_evals` evaluations in a row; 0 disables.
    pub stop_when_win_rate: f64,
    pub stop_consecutive_evals: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 32,
            buffer_episodes: 5_000,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_anneal_steps: 50_000,
            eval_interval: 0,
            eval_episodes: 0,
            checkpoint_every_evals: 0,
            stop_when_win_rate: 0.0,
            stop_consecutive_evals: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct OfflineConfig {
    /// Stage-one gradient steps (auxiliary losses only).
    pub pretrain_steps: u64,
    /// Stage-two gradient steps (full objective).
    pub joint_steps: u64,
    /// Gradient steps between greedy evaluations during stage two.
    pub eval_interval: u64,
    pub regularizer: Regularizer,
    /// Weight of the conservative penalty.
    pub beta: f64,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        OfflineConfig {
            pretrain_steps: 20_000,
            joint_steps: 20_000,
            eval_interval: 2_000,
            regularizer: Regularizer::Conservative,
            beta: 1.0,
        }
    }
}

/// Complete resolved configuration of one run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Registry key, e.g. `hallway-4x6x10`.
    pub env: String,
    pub algo: Algo,
    pub mixer: MixerKind,
    pub seed: u64,
    /// Online environment-step budget.
    pub steps: u64,
    /// Traffic-junction sight radius; negative means full observability.
    /// Ignored by environments whose scenario string fixes the sight.
    pub sight: i32,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub offline: OfflineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: "hallway-4x6x10".to_string(),
            algo: Algo::Masia,
            mixer: MixerKind::Qmix,
            seed: 0,
            steps: 2_000_000,
            sight: 1,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            offline: OfflineConfig::default(),
        }
    }
}

impl RunConfig {
    /// True when the TD gradient must bypass the encoder at `env_step`.
    pub fn in_warmup(&self, env_step: u64) -> bool {
        (self.loss.lambda1 != 0.0 || self.loss.lambda2 != 0.0)
            && env_step < self.loss.warmup_steps
    }
}
