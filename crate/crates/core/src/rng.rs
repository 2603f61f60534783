//! Seeded, portable pseudorandom streams.
//!
//! Every stream is a xoshiro256++ generator whose 256-bit state is expanded
//! from a 64-bit seed with SplitMix64 (the reference seeding procedure of the
//! xoshiro authors). Normal variates use the ziggurat sampler of `rand_distr`,
//! Poisson variates its PTRS/inversion sampler; both consume only `u64` draws,
//! so a stream is identical on every platform.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_distr::{Distribution, Poisson, StandardNormal};
use rand_xoshiro::Xoshiro256PlusPlus;

/// Deterministic random stream. Not `Sync`: share it only behind external
/// serialization.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: Xoshiro256PlusPlus,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    /// Independent stream keyed by `seed` and a path of stream indices, e.g.
    /// `(seed, [step, patch])`. Used to give each training step and patch its
    /// own stream so that resuming and batching never reorder draws.
    pub fn derive(seed: u64, path: &[u64]) -> Self {
        let mut key = splitmix64(seed);
        for &p in path {
            key = splitmix64(key ^ splitmix64(p.wrapping_add(0xA076_1D64_78BD_642F)));
        }
        Self::new(key)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi]`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`. `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below(0)");
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Poisson variate with the given mean; a mean of 0 yields 0.
    pub fn poisson(&mut self, mean: f64) -> f64 {
        if mean <= 0.0 {
            return 0.0;
        }
        Poisson::new(mean)
            .expect("finite positive Poisson mean")
            .sample(&mut self.inner)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }
}
