//! Seeded random substreams.
//!
//! Every randomized routine draws from a ChaCha8 generator keyed by a base
//! seed and a stream index, so results do not depend on execution order or
//! thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seed used when none is given.
pub const DEFAULT_SEED: u64 = 42;

pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Substream for a retry attempt of `stream`; attempt 0 equals [`substream`].
pub fn retry_substream(seed: u64, stream: u64, attempt: u64) -> ChaCha8Rng {
    substream(seed ^ attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15), stream)
}
