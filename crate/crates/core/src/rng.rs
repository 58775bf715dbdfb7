//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator (`rand_chacha::ChaCha8Rng`) whose
//! 32-byte key is `SHA-256(seed as little-endian u64 || label as UTF-8)`.
//! Both primitives are platform independent, so a `(seed, label)` pair names
//! one draw sequence everywhere.
//!
//! Uniform reals are built from the top 53 bits of one `u64` draw:
//! `(x >> 11) * 2^-53`, which lies in `[0, 1)`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// A labelled, deterministic pseudo-random stream.
#[derive(Debug, Clone)]
pub struct RandomStream {
    seed: u64,
    label: String,
    rng: ChaCha8Rng,
}

/// Derives the substream named `label` from a scenario seed.
pub fn derive_stream(seed: u64, label: &str) -> RandomStream {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let mut key = [0u8; 32];
    key.copy_from_slice(&hasher.finalize());
    RandomStream {
        seed,
        label: label.to_owned(),
        rng: ChaCha8Rng::from_seed(key),
    }
}

impl RandomStream {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Child stream labelled `"{parent}/{name}"`. Independent of how many
    /// draws the parent has already made.
    pub fn fork(&self, name: &str) -> RandomStream {
        derive_stream(self.seed, &format!("{}/{}", self.label, name))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`; returns `lo` when the interval is empty.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// `true` with probability `p` (clamped to `[0, 1]`).
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal scaled by `sigma`.
    pub fn gaussian(&mut self, sigma: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.rng);
        z * sigma
    }

    /// Index drawn from non-negative `weights` by inverse CDF. Weights need
    /// not be normalized. Falls back to the last positive entry when rounding
    /// leaves the draw past the cumulative sum.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let target = self.uniform() * total;
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (i, &w) in weights.iter().enumerate() {
            if w > 0.0 {
                last_positive = i;
                acc += w;
                if target < acc {
                    return i;
                }
            }
        }
        last_positive
    }
}
