//! Seeded random streams.
//!
//! Every random draw in sample construction and training comes from a
//! ChaCha stream keyed by `(seed, id)`, so results do not depend on the
//! order in which samples are built.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Independent stream `id` under `seed`.
pub fn stream(seed: u64, id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}
