//! Cooperative multi-agent Q-learning with self-supervised message aggregation.
//!
//! The crate is organized bottom-up:
//!
//! * [`diffcore`] - dense f64 tensors, a define-by-run reverse-mode tape,
//!   Adam, EMA target updates, and checkpoint serialization.
//! * [`envs`] - the lightweight cooperative benchmarks (Hallway, grouped
//!   Hallway, level-based foraging, traffic junction) behind one trait.
//! * [`masia`] - the message-aggregation networks (attention encoder,
//!   integration variants, per-agent focusing) and the two representation
//!   losses (state reconstruction, multi-step latent rollout).
//! * [`qlearn`] - recurrent per-agent Q networks, VDN/QMIX mixing, the
//!   masked TD loss, and the combined update applied by both trainers.
//! * [`train`] - episodic replay, epsilon-greedy rollouts, greedy
//!   evaluation, and the online training loop with JSONL metrics.
//! * [`offline`] - dataset collection (expert / noisy / replay mixtures),
//!   the on-disk episode format, and the two-stage offline trainer.
//! * [`stats`] - medians and seeded percentile-bootstrap confidence
//!   intervals for reporting.

pub mod config;
pub mod diffcore;
pub mod envs;
pub mod masia;
pub mod offline;
pub mod qlearn;
pub mod rng;
pub mod stats;
pub mod train;

pub use config::RunConfig;
pub use diffcore::{DiffError, ParamGroup, Tape, Tensor, Var};
pub use envs::{EnvDescriptor, EnvStep, Environment};
