//! Message aggregation networks and the self-supervised representation
//! losses that train them.
//!
//! The encoder turns the stacked per-agent observations of one timestep
//! into a single aggregated representation `z` via self-attention plus an
//! integration stage; per-agent focusing networks gate `z` into
//! agent-specific extracts. Two auxiliary losses shape `z`: reconstruction
//! of the global state through a decoder, and a K-step latent rollout
//! regressed onto the representations of a slowly-updated target encoder.

pub mod aggregate;
pub mod layers;
pub mod repr;

pub use aggregate::{d_z, encode, focus_gates, init_encoder, init_focus};
pub use repr::{
    decode, init_decoder, init_latent, latent_step, reconstruction_loss, rollout_loss,
};
