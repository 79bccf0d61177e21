//! Seeded, platform-independent random streams.
//!
//! Every stochastic component takes a caller-owned generator. Independent
//! runs derive their own stream from a global seed and a run id so they can
//! execute in any order, or in parallel, and still produce identical output.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng as StreamRng;

/// Generator for stream `stream` of `seed`.
pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = StreamRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes several ids into one stream id.
pub fn stream_id(parts: &[u64]) -> u64 {
    parts.iter().fold(0x9e37_79b9_7f4a_7c15, |acc, &p| splitmix64(acc ^ p))
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
