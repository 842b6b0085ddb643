//! Seeded randomness.
//!
//! Every random draw in the crate comes from SplitMix64 (state += 0x9e3779b97f4a7c15,
//! then the standard xor-shift-multiply finalizer). Named sub-streams are split
//! off a root seed as `SplitMix64(finalize(root ^ fnv1a64(name)))`, so a run is
//! fully determined by one `u64` and the stream names below. Conversions:
//!
//! * `uniform()` = `(next_u64() >> 11) · 2⁻⁵³`, in `[0, 1)`
//! * `below(n)`  = high 64 bits of `next_u64() · n`
//! * `shuffle`   = Fisher–Yates from the last index down, `j = below(i + 1)`

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

pub struct Rng {
    inner: SplitMix64,
}

fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn finalize(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: SplitMix64::seed_from_u64(seed),
        }
    }

    /// Independent stream named `name` under `seed`.
    pub fn stream(seed: u64, name: &str) -> Self {
        Self::new(finalize(seed ^ fnv1a64(name)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform() as f32
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
