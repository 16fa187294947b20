//! Seed fan-out.
//!
//! Every run takes a single `u64` seed. Sub-components draw their own
//! generator from `derive_seed(seed, stream)`, where `stream` is a fixed
//! per-purpose constant (see [`Stream`]) optionally offset by a worker or
//! epoch index. The derivation is two rounds of SplitMix64:
//!
//! ```text
//! derive_seed(s, k) = splitmix64(s ^ splitmix64(k + 0x9E3779B97F4A7C15))
//! ```
//!
//! so sub-seeds do not depend on how many other streams were drawn or in
//! which order, and partitioned work reproduces regardless of thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named sub-streams of a run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Scenes = 1,
    Prototypes = 2,
    FeatureNoise = 3,
    DictRandom = 4,
    HeadInit = 5,
    Shuffle = 6,
    NccData = 7,
    NccInit = 8,
    NccShuffle = 9,
    Split = 10,
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_add(0x9E37_79B9_7F4A_7C15)))
}

/// Generator for `stream` of `seed`, offset by `index` (worker, epoch, ...).
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> Rng {
    let k = (stream as u64) << 32 | index;
    Rng::seed_from_u64(derive_seed(seed, k))
}
