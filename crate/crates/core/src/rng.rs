//! Keyed random streams.
//!
//! Every random draw in a run comes from a ChaCha stream whose seed is a hash
//! of the run seed and a path of integers (domain, step, region, particle, ...).
//! Streams therefore do not depend on the order in which rayon schedules work.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains; distinct tags keep the seeds of unrelated draws apart.
pub mod domain {
    pub const MODEL: u64 = 1;
    pub const SIGNAL: u64 = 2;
    pub const BURN_IN: u64 = 3;
    pub const PROPAGATE: u64 = 4;
    pub const OBSERVE: u64 = 5;
    pub const RESAMPLE: u64 = 6;
    pub const JITTER: u64 = 7;
    pub const SELECT: u64 = 8;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A ChaCha8 stream determined entirely by `seed` and `path`.
pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    let mut bytes = [0u8; 32];
    let mut s = h;
    for chunk in bytes.chunks_mut(8) {
        s = splitmix(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}
