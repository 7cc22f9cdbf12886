//! Counter-based random numbers.
//!
//! Every stream is SplitMix64: the `i`-th 64-bit output of a stream with key
//! `k` is `mix(k + (i + 1) * 0x9E3779B97F4A7C15)` (wrapping arithmetic) where
//! `mix` is the SplitMix64 finalizer
//!
//! ```text
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! z =  z ^ (z >> 31)
//! ```
//!
//! Uniform floats take the top 53 bits: `(x >> 11) * 2^-53`, in `[0, 1)`.
//! Normal draws use Box-Muller on two consecutive uniforms `u1, u2`:
//! `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`. Sub-streams are derived with
//! [`derive_key`], so every consumer can be reproduced from the root seed
//! and a tag without sharing mutable state.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Key of the sub-stream `tag` below `key`.
#[inline]
pub fn derive_key(key: u64, tag: u64) -> u64 {
    mix64(key ^ mix64(tag.wrapping_add(GOLDEN)))
}

/// The `index`-th output of stream `key`, without materializing a generator.
#[inline]
pub fn hash_at(key: u64, index: u64) -> u64 {
    mix64(key.wrapping_add(index.wrapping_add(1).wrapping_mul(GOLDEN)))
}

#[inline]
pub fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            key: seed,
            counter: 0,
        }
    }

    /// Independent generator for a named purpose.
    pub fn stream(seed: u64, tag: u64) -> Self {
        Rng::new(derive_key(seed, tag))
    }

    pub fn next_u64(&mut self) -> u64 {
        let out = hash_at(self.key, self.counter);
        self.counter = self.counter.wrapping_add(1);
        out
    }

    pub fn uniform(&mut self) -> f64 {
        unit_f64(self.next_u64())
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[lo, hi]` (inclusive).
    pub fn int_range(&mut self, lo: i64, hi: i64) -> i64 {
        assert!(hi >= lo);
        let span = (hi - lo) as u64 + 1;
        lo + (self.next_u64() % span) as i64
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn choose<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.int_range(0, items.len() as i64 - 1) as usize]
    }
}
