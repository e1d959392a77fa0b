//! Deterministic random streams.
//!
//! Every random draw in the crate comes from [`RngStream`], a ChaCha20 keystream
//! (the 20-round variant as published by Bernstein and implemented by
//! `rand_chacha`) addressed by `(seed, domain, stream)`:
//!
//! * key bytes `0..8` hold `seed` little-endian, bytes `8..16` hold `domain`
//!   little-endian, bytes `16..32` are zero;
//! * the 64-bit ChaCha stream id is `stream`; the block counter starts at 0.
//!
//! Derived draws are defined here rather than delegated to a distribution
//! library, so sequences stay reproducible across implementations:
//!
//! * `next_u64` is two consecutive keystream words, low word first;
//! * `uniform` is `(next_u64 >> 11) * 2^-53`, a float in `[0, 1)`;
//! * `below(n)` is Lemire's multiply-shift with rejection on `next_u64`.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

/// Name recorded in plan files and draw logs.
pub const GENERATOR: &str = "chacha20-v1";

/// Domain tag for training-schedule shuffles.
pub const DOMAIN_SCHEDULE: u64 = 1;
/// Domain tag for augmentation draws.
pub const DOMAIN_AUGMENT: u64 = 2;

/// Address of a stream: identical addresses yield identical draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamId {
    pub seed: u64,
    pub domain: u64,
    pub stream: u64,
}

pub struct RngStream {
    id: StreamId,
    inner: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, domain: u64, stream: u64) -> Self {
        Self::from_id(StreamId {
            seed,
            domain,
            stream,
        })
    }

    pub fn from_id(id: StreamId) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&id.seed.to_le_bytes());
        key[8..16].copy_from_slice(&id.domain.to_le_bytes());
        let mut inner = ChaCha20Rng::from_seed(key);
        inner.set_stream(id.stream);
        Self { id, inner }
    }

    pub fn id(&self) -> StreamId {
        self.id
    }

    pub fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    pub fn next_u64(&mut self) -> u64 {
        let lo = self.inner.next_u32() as u64;
        let hi = self.inner.next_u32() as u64;
        lo | (hi << 32)
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. Panics if `n == 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = self.next_u64() as u128 * n as u128;
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    /// Uniform integer in `[lo, hi)`.
    pub fn int_range(&mut self, lo: i64, hi: i64) -> i64 {
        assert!(hi > lo, "empty range");
        lo + self.below((hi - lo) as u64) as i64
    }

    /// `true` with probability `p`.
    pub fn coin(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// In-place Fisher-Yates, walking from the last index down.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
