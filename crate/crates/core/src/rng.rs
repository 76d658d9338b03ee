//! Seeded random streams.
//!
//! All randomness derives from one `u64` seed. Components draw from named
//! sub-streams so that, for example, changing the number of probes does not
//! perturb the weight initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent purposes that consume randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Batches = 3,
    Probes = 4,
    Prior = 5,
    Posterior = 6,
    Kernel = 7,
}

/// Generator for `stream`, item `index`, under `seed`.
pub fn stream(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) ^ index);
    rng
}

/// Derives a child seed, used where a whole sub-computation takes a seed.
pub fn derive_seed(seed: u64, s: Stream) -> u64 {
    use rand::RngCore;
    stream(seed, s, u64::MAX >> 16).next_u64()
}
