//! Seeded random streams.
//!
//! Every stochastic routine draws from a [`Stream`], a ChaCha8 generator
//! keyed by a 64-bit seed. Child seeds for replicates come from
//! [`derive_seed`], so a whole experiment is a pure function of its master
//! seed.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of replicate `index` under `master`:
/// `mix64(master ^ (index + 1) * 0x9E3779B97F4A7C15)` with wrapping arithmetic.
#[inline]
pub fn derive_seed(master: u64, index: u64) -> u64 {
    mix64(master ^ index.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA))
}

/// Uniform and sign variates from a seeded ChaCha8 stream.
#[derive(Debug, Clone)]
pub struct Stream {
    inner: ChaCha8Rng,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream { inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// `+1` or `-1` from the top bit of one draw.
    #[inline]
    pub fn sign(&mut self) -> f64 {
        if self.next_u64() >> 63 == 1 {
            1.0
        } else {
            -1.0
        }
    }

    /// Two independent standard normals from two uniforms (Box-Muller).
    #[inline]
    pub fn normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        (r * c, r * s)
    }
}
