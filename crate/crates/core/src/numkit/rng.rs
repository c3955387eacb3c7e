//! Seeded, stream-addressed randomness.
//!
//! Every consumer of randomness in the crate owns its own `(seed, stream)`
//! pair, so adding draws to one consumer never perturbs another. That
//! isolation is what makes the A/B experiment harness meaningful: two runs
//! share data exactly while differing elsewhere.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream-id domains. Composite ids are built with [`stream_id`].
pub const STREAM_SPEAKER: u64 = 1;
pub const STREAM_UTTERANCE: u64 = 2;
pub const STREAM_INIT: u64 = 3;
pub const STREAM_SAMPLER: u64 = 4;
pub const STREAM_TRIALS: u64 = 5;

/// Packs `(domain, a, b)` into a single 64-bit stream id.
pub fn stream_id(domain: u64, a: u64, b: u64) -> u64 {
    debug_assert!(domain < 1 << 8 && a < 1 << 28 && b < 1 << 28);
    (domain << 56) | (a << 28) | b
}

/// A deterministic counter-based random stream.
///
/// Identical `(seed, stream)` pairs produce identical draw sequences on any
/// platform. The word position is exposed so trainer state can be
/// checkpointed and resumed bit-exactly.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
    seed: u64,
    stream: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { rng, seed, stream }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Current position in the keystream, for checkpointing.
    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Restores a stream checkpointed via seed/stream/word_pos.
    pub fn restore(seed: u64, stream: u64, word_pos: u128) -> Self {
        let mut s = RngStream::new(seed, stream);
        s.rng.set_word_pos(word_pos);
        s
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // Modulo bias is < n / 2^64, far below anything observable here.
        (self.next_u64() % n as u64) as usize
    }

    /// Uniform integer in `[lo, hi]` inclusive.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        lo + self.below(hi - lo + 1)
    }

    /// One standard-normal draw (Box-Muller, cosine branch).
    ///
    /// Two uniforms are consumed per draw and the sine branch is discarded,
    /// which keeps the stream state fully described by the word position.
    pub fn gaussian(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// `n` standard-normal draws.
    pub fn draw_gaussian(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.gaussian()).collect()
    }

    /// Chooses `k` distinct indices from `0..n` by partial Fisher-Yates.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n);
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
    fn same_seed_and_stream_repeats() {
        let mut a = RngStream::new(42, 7);
        let mut b = RngStream::new(42, 7);
        assert_eq!(a.draw_gaussian(100), b.draw_gaussian(100));
    }

    #[test]
    fn different_streams_differ() {
        let mut a = RngStream::new(42, 1);
        let mut b = RngStream::new(42, 2);
        assert_ne!(a.draw_gaussian(16), b.draw_gaussian(16));
    }

    #[test]
    fn zero_draws_is_empty() {
        let mut s = RngStream::new(1, 1);
        assert!(s.draw_gaussian(0).is_empty());
    }

    #[test]
    fn gaussian_moments() {
        let mut s = RngStream::new(123, 9);
        let xs = s.draw_gaussian(100_000);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.02, "sample mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "sample variance {var}");
    }

    #[test]
    fn word_pos_restore_resumes_sequence() {
        let mut a = RngStream::new(5, 3);
        a.draw_gaussian(17);
        let pos = a.word_pos();
        let tail: Vec<f64> = a.draw_gaussian(10);
        let mut b = RngStream::restore(5, 3, pos);
        assert_eq!(b.draw_gaussian(10), tail);
    }

    #[test]
    fn choose_distinct_covers_all_when_k_equals_n() {
        let mut s = RngStream::new(7, 1);
        let mut picked = s.choose_distinct(12, 12);
        picked.sort_unstable();
        assert_eq!(picked, (0..12).collect::<Vec<_>>());
    }
}
