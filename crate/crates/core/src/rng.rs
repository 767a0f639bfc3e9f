//! Seed derivation. Every stochastic component draws from its own ChaCha
//! stream keyed by `(seed, stream, index)` so that adding draws in one place
//! never shifts the randomness seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ stream.wrapping_mul(0xA24B_AED4_963E_E407)) ^ index)
}

pub fn stream(seed: u64, stream: u64, index: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, stream, index))
}

pub mod streams {
    pub const USERS: u64 = 1;
    pub const VIDEOS: u64 = 2;
    pub const QUERIES: u64 = 3;
    pub const LOGS: u64 = 4;
    pub const INIT: u64 = 5;
    pub const BATCHES: u64 = 6;
    pub const FEEDBACK: u64 = 7;
    pub const ORACLE_EMBED: u64 = 8;
    pub const HNSW: u64 = 9;
    pub const GRADCHECK: u64 = 10;
    pub const BOOTSTRAP: u64 = 11;
    pub const EVAL_SESSIONS: u64 = 12;
    pub const TOKENS: u64 = 13;
}
