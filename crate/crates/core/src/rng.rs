//! Seeded random number generation.
//!
//! Every stochastic operation takes an explicit [`Generator`]. It wraps ChaCha8,
//! a counter-based stream cipher generator seeded from a single `u64`, so a
//! seed fully determines every draw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug)]
pub struct Generator {
    rng: ChaCha8Rng,
}

impl Generator {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent child stream; identical `(seed, stream)` pairs reproduce it.
    pub fn fork(&mut self, stream: u64) -> Self {
        let base: u64 = self.rng.random();
        Self::new(splitmix64(base ^ splitmix64(stream)))
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Standard Gumbel(0, 1) sample.
    pub fn gumbel(&mut self) -> f64 {
        // u in (0, 1) so both logs stay finite
        let u = loop {
            let u = self.uniform();
            if u > 0.0 {
                break u;
            }
        };
        -(-u.ln()).ln()
    }

    /// `k` distinct indices from `0..n`, uniformly, in draw order.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot choose {k} of {n}");
        // partial Fisher-Yates
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// SplitMix64 finalizer, used for seed derivation and stable hashing.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Generator::new(42);
        let mut b = Generator::new(42);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
        assert_eq!(a.fork(3).normal().to_bits(), b.fork(3).normal().to_bits());
    }

    #[test]
    fn choose_distinct_has_no_repeats() {
        let mut g = Generator::new(1);
        let mut v = g.choose_distinct(50, 50);
        v.sort();
        assert_eq!(v, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn gumbel_mean_is_euler_gamma() {
        let mut g = Generator::new(7);
        let n = 200_000;
        let mean = (0..n).map(|_| g.gumbel()).sum::<f64>() / n as f64;
        assert!((mean - 0.577_215_664_9).abs() < 0.01, "{mean}");
    }
}
