//! Named random sub-streams derived from a single master seed.
//!
//! Every consumer gets its own ChaCha stream keyed by `(seed, stream, index)`,
//! so drawing extra probes never shifts minibatch order and per-group work can
//! be reordered or parallelised without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Minibatch = 3,
    Probe = 4,
    Dither = 5,
    Refresh = 6,
    Diagnostics = 7,
    Perturb = 8,
}

/// Index space per stream: 56 bits.
const INDEX_BITS: u32 = 56;

pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = index & ((1u64 << INDEX_BITS) - 1);
    rng.set_stream(((stream as u64) << INDEX_BITS) | idx);
    rng
}

/// Mixes two words into a derived key (splitmix64 finaliser).
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
