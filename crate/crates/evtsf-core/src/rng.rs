//! Deterministic, stream-splittable randomness.
//!
//! Every stochastic operation in this crate takes an explicit [`StreamRng`]
//! handle. A handle is addressed by a root seed plus a path of stream names
//! (`"init"`, `"shuffle-epoch-3"`, ...), so independent consumers draw from
//! independent streams and adding a consumer never shifts the draws seen by
//! another. Two handles with the same seed and path produce identical
//! sequences on every platform.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::{Error, Result};
use alloc::string::String;
use alloc::vec::Vec;

/// Folds a stream name into a parent seed (FNV-1a). The std hasher is not
/// stable across releases, so the mixing is spelled out here.
fn derive_seed(seed: u64, name: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for b in seed.to_le_bytes() {
        h = (h ^ u64::from(b)).wrapping_mul(PRIME);
    }
    for b in name.as_bytes() {
        h = (h ^ u64::from(*b)).wrapping_mul(PRIME);
    }
    h
}

/// Seeded random generator that can split off named child streams.
#[derive(Debug, Clone)]
pub struct StreamRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl StreamRng {
    /// Root generator for `seed`.
    pub fn from_seed(seed: u64) -> Self {
        StreamRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Child generator addressed by `name`. Splitting depends only on the
    /// parent's seed and the name, never on how much the parent has drawn.
    pub fn stream(&self, name: &str) -> StreamRng {
        StreamRng::from_seed(derive_seed(self.seed, name))
    }

    /// The seed this generator was constructed from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    /// Uniform draw from `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw.
    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Normal draw with the given mean and standard deviation.
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    /// Beta(`a`, `b`) draw; rejects non-positive parameters.
    pub fn beta(&mut self, a: f64, b: f64) -> Result<f64> {
        let dist = Beta::new(a, b).map_err(|_| {
            Error::Config(alloc::format!(
                "beta parameters must be positive, got ({a}, {b})"
            ))
        })?;
        Ok(dist.sample(&mut self.inner))
    }

    /// Uniform index in `0..n`. Panics if `n == 0`.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "cannot draw an index from an empty range");
        self.inner.random_range(0..n)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `count` i.i.d. normal draws with standard deviation `std`.
    pub fn normal_vec(&mut self, count: usize, std: f64) -> Vec<f64> {
        (0..count).map(|_| self.normal(0.0, std)).collect()
    }
}

impl RngCore for StreamRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest);
    }
}

/// Convenience for building dynamic stream names without importing `format!`
/// at every call site.
pub fn stream_name(prefix: &str, index: usize) -> String {
    alloc::format!("{prefix}-{index}")
}
