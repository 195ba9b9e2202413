//! Seeded random streams shared by every generator in the crate.
//!
//! All randomness is drawn from ChaCha8 (`rand_chacha::ChaCha8Rng`) keyed via
//! `SeedableRng::seed_from_u64`. On top of the raw 64-bit output stream the
//! crate uses three fixed derivations so fixtures can be regenerated in other
//! languages:
//!
//! * `below(n)`: Lemire's multiply-shift with rejection on `next_u64`.
//! * `uniform_open()`: `((next_u64 >> 11) + 1) * 2^-53`, a value in (0, 1].
//! * `gaussian()`: basic Box-Muller, `sqrt(-2 ln u1) * cos(2 pi u2)`, one
//!   normal per two uniforms (the sine branch is discarded).
//!
//! Independent streams are keyed with [`derive_seed`].

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer over `seed + GOLDEN * (stream + 1)`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(GOLDEN.wrapping_mul(stream.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Stream `stream` of the family keyed by `seed`.
    pub fn stream(seed: u64, stream: u64) -> Self {
        Self::new(derive_seed(seed, stream))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `[0, n)`. `n` must be non-zero.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn gaussian(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform_open();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Odd 64-bit multiplier for multiply-shift hashing.
    pub fn odd_u64(&mut self) -> u64 {
        self.next_u64() | 1
    }
}
