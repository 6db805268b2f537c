//! Seeded random streams.
//!
//! A `u64` seed (plus optional tags) is expanded with SplitMix64 into a
//! 256-bit key for ChaCha8, which is counter based: the stream for a given
//! key is fixed regardless of platform or crate-internal sampling changes,
//! because every draw below goes through raw `next_u32`/`next_u64`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// Deterministic generator keyed by a seed and a list of tags.
#[derive(Debug, Clone)]
pub struct Stream {
    inner: ChaCha8Rng,
}

impl Stream {
    pub fn new(seed: u64, tags: &[u64]) -> Self {
        let mut mix = SplitMix64::new(seed);
        for &t in tags {
            let folded = mix.next_u64() ^ t;
            mix = SplitMix64::new(folded);
        }
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&mix.next_u64().to_le_bytes());
        }
        Self {
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    /// Tag derived from a string, for streams keyed by names.
    pub fn tag(name: &str) -> u64 {
        // FNV-1a
        name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
        })
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n) by rejection, n > 0.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0);
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.inner.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
