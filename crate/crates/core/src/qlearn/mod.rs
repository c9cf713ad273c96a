//! Decomposed Q-learning over batched episodes.
//!
//! Per-agent recurrent Q networks are trained through a mixing head
//! (additive or state-conditioned monotonic) against EMA target copies,
//! with the aggregation encoder's representation losses added to the TD
//! objective in a single backward pass.

pub mod batch;
pub mod nets;
pub mod update;

pub use batch::{EpisodeBatch, EpisodeRecord};
pub use nets::{
    agent_step, init_agent, init_qmix, mixer_state_width, qmix_mix, vdn_mix, zbar_width, Model,
};
pub use update::{
    build_paths, combined_loss, combined_update, make_adam, scan_q, td_loss, CombinedLoss,
    Paths, ScanOut, Side, UpdateStats,
};
