//! Deterministic RNG streams.
//!
//! Every stochastic step in the library draws from a stream derived from
//! `(master seed, purpose tag, indices…)` rather than from a shared stateful
//! generator. Streams are therefore independent of execution order, which is
//! what makes parallel epochs, resumed runs, and cross-strategy comparisons
//! bit-reproducible.

use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;

/// The concrete RNG used everywhere. ChaCha keeps the byte stream stable
/// across platforms and `rand` releases, unlike `StdRng`.
pub type Stream = ChaCha12Rng;

/// Purpose tags for derived streams. Values are arbitrary but fixed; changing
/// one changes every downstream artifact.
pub mod tag {
    pub const PARAM_INIT: u64 = 0x01;
    pub const EPOCH_COMPOSE: u64 = 0x02;
    pub const DROPOUT: u64 = 0x03;
    pub const MASS_MASK: u64 = 0x04;
    pub const GENERATE: u64 = 0x05;
    pub const PERTURB_DROP: u64 = 0x06;
    pub const PERTURB_SHUFFLE: u64 = 0x07;
    pub const SYNTH: u64 = 0x08;
}

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derive an independent stream from a master seed and a list of tags
/// (purpose, epoch, step, index, …).
pub fn stream(seed: u64, tags: &[u64]) -> Stream {
    let mut state = splitmix64(seed ^ 0x6a09e667f3bcc908);
    for &t in tags {
        state = splitmix64(state ^ splitmix64(t));
    }
    Stream::seed_from_u64(state)
}
