//! Portable random draws on top of ChaCha20.
//!
//! Only `next_u64` of the underlying generator is consumed, and the float
//! and integer conversions are spelled out here, so a stream is fully
//! described by its seed and [`crate::scenario::RNG_ALGORITHM`].

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub(crate) struct Draws(ChaCha20Rng);

impl Draws {
    pub(crate) fn new(seed: u64) -> Self {
        Self(ChaCha20Rng::seed_from_u64(seed))
    }

    /// Uniform on [0, 1) with 53 bits of resolution.
    pub(crate) fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on the inclusive range `lo..=hi`, by rejection.
    pub(crate) fn int_inclusive(&mut self, lo: u32, hi: u32) -> u32 {
        let span = u64::from(hi - lo) + 1;
        let zone = (u64::MAX / span) * span;
        loop {
            let x = self.0.next_u64();
            if x < zone {
                return lo + (x % span) as u32;
            }
        }
    }

    /// Fisher-Yates permutation of `0..n`.
    pub(crate) fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        for k in (1..n).rev() {
            let j = self.int_inclusive(0, k as u32) as usize;
            order.swap(k, j);
        }
        order
    }
}
