//! Keyed, counter-based random streams.
//!
//! A stream is identified by `(seed, stream_id)`. The seed keys a ChaCha8
//! generator and the stream id selects its independent nonce, so per-sample
//! streams can be created in any order (or in parallel) without changing
//! what each of them draws.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        let mut state = seed;
        for chunk in key.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        let mut inner = ChaCha8Rng::from_seed(key);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// A fresh stream under the same seed whose id is a keyed mix of this
    /// stream's id and `tag`. Does not consume draws from `self`.
    pub fn derive(&self, tag: u64) -> RngStream {
        let id = splitmix64(self.stream ^ splitmix64(tag.wrapping_add(0xA5A5_5A5A_0F0F_F0F0)));
        RngStream::new(self.seed, id)
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_f64()).collect()
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot choose {k} of {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_draws_is_empty() {
        assert!(RngStream::new(7, 0).uniform(0).is_empty());
    }

    #[test]
    fn same_key_same_sequence() {
        let a = RngStream::new(7, 0).uniform(64);
        let b = RngStream::new(7, 0).uniform(64);
        assert_eq!(a, b);
        assert!(a.iter().all(|&x| (0.0..1.0).contains(&x)));
    }

    #[test]
    fn streams_differ() {
        let a = RngStream::new(7, 0).uniform(16);
        let b = RngStream::new(7, 1).uniform(16);
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));
    }

    #[test]
    fn draws_advance_the_stream() {
        let mut s = RngStream::new(3, 9);
        let first = s.uniform(4);
        let second = s.uniform(4);
        assert_ne!(first, second);
        let mut replay = RngStream::new(3, 9);
        replay.uniform(4);
        assert_eq!(replay.uniform(4), second);
    }

    #[test]
    fn derive_is_order_independent() {
        let root = RngStream::new(11, 0);
        let mut consumed = root.clone();
        consumed.uniform(100);
        assert_eq!(root.derive(5).uniform(8), consumed.derive(5).uniform(8));
        assert_ne!(root.derive(5).uniform(8), root.derive(6).uniform(8));
    }

    #[test]
    fn pinned_first_draws() {
        // Frozen from this generator; guards against silent changes to the
        // key expansion or the float conversion.
        let mut s = RngStream::new(7, 0);
        let bits: Vec<u64> = (0..2).map(|_| s.next_f64().to_bits()).collect();
        assert_eq!(bits, [0x3fd8_7dc4_64ce_54a8, 0x3fd9_fc89_d0aa_95c8]);
    }

    #[test]
    fn choose_distinct_has_no_repeats() {
        let mut s = RngStream::new(1, 2);
        let mut picked = s.choose_distinct(10, 10);
        picked.sort_unstable();
        assert_eq!(picked, (0..10).collect::<Vec<_>>());
    }
}
