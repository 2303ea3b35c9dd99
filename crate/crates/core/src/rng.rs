//! Seeded random streams.
//!
//! Every stochastic routine takes `&mut impl Rng`; the harness owns a
//! [`ChaCha8Rng`] per concern so runs are reproducible bit for bit.

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

pub use rand_chacha::ChaCha8Rng;

/// Deterministic sub-stream of a base seed, addressed by `stream`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids used by the harness.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TRAIN: u64 = 3;
    pub const ENV: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const REFS: u64 = 6;
    pub const SUPPORT: u64 = 7;
    pub const DIFFUSION: u64 = 8;
    pub const ENERGY: u64 = 9;
    pub const ONLINE: u64 = 10;
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> alloc::vec::Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

pub fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
