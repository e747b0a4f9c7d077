//! Seeded random streams.
//!
//! All randomness in the crate comes from ChaCha8 (`rand_chacha` 0.9). A master seed
//! selects the key and an integer stream id selects an independent substream, so
//! parallel replicates draw from `substream(seed, replicate)` and stay reproducible
//! regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type PanelRng = ChaCha8Rng;

pub const RNG_ALGORITHM: &str = "chacha8-rand_chacha-0.9";

pub fn seeded(seed: u64) -> PanelRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn substream(seed: u64, stream: u64) -> PanelRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
