//! Seeded counter-based pseudo-random generator.
//!
//! All randomness in the crate flows from one top-level seed. Consumers get
//! independent streams via [`Rng::stream`] so that, e.g., drawing more
//! dataset noise cannot perturb the loader shuffles of the same run. The
//! generator advances a 64-bit counter and mixes it (splitmix64), which makes
//! state trivially serializable and bit-identical across platforms.

use serde::{Deserialize, Serialize};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: mix64(seed) }
    }

    /// Independent stream `tag` derived from `seed`.
    pub fn stream(seed: u64, tag: u64) -> Self {
        Rng {
            state: mix64(seed).wrapping_add(mix64(tag.wrapping_mul(GOLDEN) ^ 0x5851_F42D_4C95_7F2D)),
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Rejection-sampled, so unbiased.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        if n == 1 {
            return 0;
        }
        let n = n as u64;
        let mask = u64::MAX >> (n - 1).leading_zeros();
        loop {
            let x = self.next_u64() & mask;
            if x < n {
                return x as usize;
            }
        }
    }

    /// Uniform integer in [lo, hi] inclusive.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi);
        lo + self.below(hi - lo + 1)
    }

    /// Standard normal via the Marsaglia polar method.
    pub fn normal(&mut self) -> f64 {
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * s.ln() / s).sqrt();
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Draws `count` distinct elements from `pool` (partial Fisher-Yates).
    /// The pool is reordered; the drawn prefix is returned.
    pub fn draw_distinct<T: Copy>(&mut self, pool: &mut [T], count: usize) -> Vec<T> {
        assert!(count <= pool.len());
        for i in 0..count {
            let j = i + self.below(pool.len() - i);
            pool.swap(i, j);
        }
        pool[..count].to_vec()
    }
}

/// Stream tags for the per-consumer seed split.
pub mod tags {
    pub const DATA_CENTERS: u64 = 1;
    pub const DATA_COUNTS: u64 = 2;
    pub const DATA_NOISE: u64 = 3;
    pub const EVAL_PAIRS: u64 = 4;
    pub const NET_INIT: u64 = 5;
    pub const POOL_INIT: u64 = 6;
    pub const LOADER_INSTANCE: u64 = 7;
    pub const LOADER_IDENTITY: u64 = 8;
    pub const QUEUE_SELECT: u64 = 9;
    pub const CLASSIFIER_INIT: u64 = 10;
    pub const BENCH_DATA: u64 = 11;
}
