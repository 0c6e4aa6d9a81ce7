//! Seeded random streams.
//!
//! All randomness comes from ChaCha8 (`rand_chacha`), which produces the same
//! stream on every platform. A stream is identified by a `(seed, stream)`
//! pair, so independent consumers (scene generation, sampling, parameter
//! init) never share state and can be re-derived in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Well-known stream ids.
pub mod streams {
    pub const SCENE: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SAMPLING: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const PROBE: u64 = 5;
}

pub type Rng = ChaCha8Rng;

/// A generator for stream `stream` of `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Splits a sub-stream off `(seed, stream)` for item `index` (an iteration,
/// a scene, a layer). Mixing is SplitMix64 so nearby indices decorrelate.
pub fn substream(seed: u64, stream_id: u64, index: u64) -> Rng {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    stream(z, stream_id)
}
