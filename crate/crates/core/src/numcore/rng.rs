use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Split-stream generator keyed by `(seed, stream)`.
///
/// Backed by ChaCha8, whose block counter makes every draw a pure function
/// of `(seed, stream, position)`: two streams never share state, and the
/// sequence does not depend on how calls to other streams interleave.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    /// Stream ids as `tag` in the high 24 bits, `index` in the low 40.
    pub fn keyed(seed: u64, tag: u32, index: u64) -> Self {
        Self::new(seed, stream_id(tag, index))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Number of 32-bit words consumed so far.
    pub fn position(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// `amount` distinct indices from `[0, n)`, sorted ascending.
    pub fn subset(&mut self, n: usize, amount: usize) -> Vec<usize> {
        let mut picked = index::sample(&mut self.inner, n, amount).into_vec();
        picked.sort_unstable();
        picked
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        // Fisher-Yates, written out so the draw sequence is fixed here
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }

    /// Samples an index from an unnormalised non-negative weight vector.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        let mut last = 0;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            last = i;
            if u < w {
                return i;
            }
            u -= w;
        }
        last
    }
}

pub fn stream_id(tag: u32, index: u64) -> u64 {
    debug_assert!(index < (1 << 40));
    ((tag as u64) << 40) | (index & ((1 << 40) - 1))
}
