//! Deterministic random numbers.
//!
//! Everything that needs randomness goes through [`Prng`], a thin wrapper
//! over ChaCha8 seeded from a `u64`. Floating-point draws are derived from
//! raw 64-bit output with fixed arithmetic, so a given seed produces the
//! same byte stream on every platform.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seedable deterministic generator (ChaCha8 keystream).
#[derive(Clone, Debug)]
pub struct Prng {
    inner: ChaCha8Rng,
    gauss_spare: Option<f64>,
}

impl Prng {
    pub fn seed(seed: u64) -> Self {
        Prng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            gauss_spare: None,
        }
    }

    /// Derive an independent stream for `(domain, index)`, e.g. one stream
    /// per training epoch. The domain name is FNV-hashed, then the three
    /// words are mixed SplitMix64-style.
    pub fn derive(seed: u64, domain: &str, index: u64) -> Self {
        let mut d: u64 = 0xcbf29ce484222325;
        for &b in domain.as_bytes() {
            d ^= b as u64;
            d = d.wrapping_mul(0x100000001b3);
        }
        let mut z = seed
            ^ d.wrapping_mul(0x9e3779b97f4a7c15)
            ^ index.wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
        Prng::seed(z)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on the open interval `(lo, hi)`. The zero mantissa is
    /// rejected so `lo` itself can never be returned.
    pub fn open_range(&mut self, lo: f64, hi: f64) -> f64 {
        loop {
            let u = self.unit();
            if u != 0.0 {
                return lo + (hi - lo) * u;
            }
        }
    }

    /// Uniform index in `0..n`, rejection-sampled to avoid modulo bias.
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index() needs a nonempty range");
        let n64 = n as u64;
        let zone = u64::MAX - (u64::MAX % n64);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n64) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller; the paired draw is cached.
    pub fn gauss(&mut self) -> f64 {
        if let Some(v) = self.gauss_spare.take() {
            return v;
        }
        let mut u1 = self.unit();
        while u1 == 0.0 {
            u1 = self.unit();
        }
        let u2 = self.unit();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.gauss_spare = Some(r * theta.sin());
        r * theta.cos()
    }
}
