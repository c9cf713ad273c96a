//! Deterministic RNG derivation.
//!
//! Every stochastic component gets its own ChaCha stream derived from the
//! run's master seed, a stream tag, and an index. Same master seed, same
//! build: bit-identical behavior.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent randomness consumers within one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Network parameter initialization.
    Init,
    /// Training environment dynamics.
    Env,
    /// Epsilon-greedy action noise.
    Explore,
    /// Evaluation environments; indexed by evaluation ordinal.
    Eval,
    /// Replay-buffer batch sampling.
    Sampler,
    /// Offline dataset collection.
    Collect,
    /// Report bootstrap resampling.
    Bootstrap,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x01,
            Stream::Env => 0x02,
            Stream::Explore => 0x03,
            Stream::Eval => 0x04,
            Stream::Sampler => 0x05,
            Stream::Collect => 0x06,
            Stream::Bootstrap => 0x07,
        }
    }
}

/// SplitMix64 finalizer; decorrelates nearby seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives the RNG for `(master, stream, index)`.
pub fn derive(master: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let seed = mix(mix(master) ^ mix(stream.tag().wrapping_shl(32) ^ index));
    ChaCha8Rng::seed_from_u64(seed)
}
