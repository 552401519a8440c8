//! Seeded random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator. A stream is
//! identified by `(seed, stream_id)`: the seed selects the key and the stream
//! id selects one of the 2^64 independent ChaCha streams under that key, so two
//! components holding different stream ids never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, stream_id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Derives a child seed for replication `index` of an experiment rooted at `seed`.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finaliser over the pair
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Well-known stream ids so that modules never draw from the same stream.
pub mod streams {
    pub const FEATURE_MAP: u64 = 1;
    pub const CENTERS: u64 = 2;
    pub const EMBEDDINGS: u64 = 3;
    pub const ERRORS: u64 = 4;
    pub const SURROGATE: u64 = 16;
    pub const BACKBONE: u64 = 32;
    pub const KMEANS: u64 = 33;
    pub const DIAGNOSTICS: u64 = 64;
}
