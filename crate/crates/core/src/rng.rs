//! Seeded random streams.
//!
//! All randomness goes through ChaCha20 so sample streams are identical on
//! every platform. Independent sub-streams for a seed are selected with the
//! ChaCha stream id rather than by re-seeding.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Seed for every stochastic routine in the crate.
pub type RngSeed = u64;

pub(crate) fn stream(seed: RngSeed, id: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
