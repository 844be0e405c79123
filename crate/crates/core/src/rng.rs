//! Seeded randomness.
//!
//! The generator is ChaCha8 (`rand_chacha`), seeded from a `u64`. ChaCha output
//! is specified bit-for-bit, so a seed produces the same stream on every
//! platform. Named sub-streams select a ChaCha stream id derived from the name,
//! which lets components (latents, noise layer, attacks) be reseeded
//! independently from one run seed.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Fnv, Real, Tensor};

pub const ALGORITHM: &str = "chacha8";

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream keyed by `name`; does not advance `self`.
    pub fn substream(&self, name: &str) -> Rng {
        let mut h = Fnv::default();
        h.write_bytes(name.as_bytes());
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(h.finish());
        Rng { seed: self.seed, inner }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }

    pub fn bit(&mut self) -> u8 {
        (self.inner.random::<u32>() & 1) as u8
    }

    pub fn normal_tensor<T: Real>(&mut self, shape: impl Into<Vec<usize>>, std: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::of(std * self.normal()))
    }

    pub fn uniform_tensor<T: Real>(&mut self, shape: impl Into<Vec<usize>>, lo: f64, hi: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::of(self.uniform_range(lo, hi)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn substreams_differ_and_are_stable() {
        let root = Rng::new(7);
        let mut x = root.substream("latents");
        let mut y = root.substream("attacks");
        let mut x2 = Rng::new(7).substream("latents");
        let a = x.next_u64();
        assert_ne!(a, y.next_u64());
        assert_eq!(a, x2.next_u64());
    }

    #[test]
    fn pinned_first_output() {
        // Guards against a silent change of generator.
        let mut r = Rng::new(0);
        let first = r.next_u64();
        let mut again = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(first, again.random::<u64>());
    }
}
