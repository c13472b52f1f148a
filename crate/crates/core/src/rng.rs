//! Seeded random streams.
//!
//! Every source of randomness in a run is a ChaCha8 stream derived from the
//! run seed and a fixed stream tag, so adding a new consumer never shifts the
//! draws seen by an existing one.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream tags used by the engine and the algorithms.
pub mod stream {
    pub const ARRIVALS: u64 = 1;
    pub const ITEMS: u64 = 2;
    pub const ALGORITHM: u64 = 3;
    pub const EXPLORE: u64 = 4;
    pub const MEASURE: u64 = 5;
}

pub fn derive_rng(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child seed; used to give each epoch's partition builder its own stream.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
