//! Seeded, counter-based random streams.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Tensor;
use crate::error::{contract, Result};

/// Deterministic random stream backed by ChaCha8.
///
/// ChaCha is a counter-mode generator: `fork` derives an independent stream
/// keyed by the same seed, so drawing from one stream never shifts another.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            stream: 0,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream of the same seed, positioned at its start.
    /// Children of different parents never coincide.
    pub fn fork(&self, stream: u64) -> Self {
        let stream = self
            .stream
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(stream.wrapping_add(1));
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Self {
            seed: self.seed,
            stream,
            inner,
        }
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Index drawn proportionally to non-negative `weights`.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Tensor of i.i.d. `N(0, sigma²)` draws.
    pub fn gaussian(&mut self, shape: &[usize], sigma: f64) -> Result<Tensor> {
        if !(sigma >= 0.0) {
            return Err(contract(format!("gaussian sigma must be >= 0, got {sigma}")));
        }
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| sigma * self.normal()).collect();
        Tensor::new(shape.to_vec(), data)
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Free-function form of [`Rng::gaussian`].
pub fn gaussian_sample(rng: &mut Rng, shape: &[usize], sigma: f64) -> Result<Tensor> {
    rng.gaussian(shape, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_sigma_is_zero_tensor() {
        let t = gaussian_sample(&mut Rng::new(1), &[3, 4], 0.0).unwrap();
        assert!(t.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn negative_sigma_rejected() {
        assert!(gaussian_sample(&mut Rng::new(1), &[2], -0.1).is_err());
    }

    #[test]
    fn same_seed_same_stream() {
        let a = gaussian_sample(&mut Rng::new(42), &[64], 1.0).unwrap();
        let b = gaussian_sample(&mut Rng::new(42), &[64], 1.0).unwrap();
        assert_eq!(a, b);
        let c = gaussian_sample(&mut Rng::new(43), &[64], 1.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn standard_normal_moments() {
        let t = gaussian_sample(&mut Rng::new(7), &[100_000], 1.0).unwrap();
        let n = t.len() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn forked_streams_are_independent_of_parent_draws() {
        let mut parent = Rng::new(5);
        let before = parent.fork(3).normal();
        parent.normal();
        parent.normal();
        assert_eq!(parent.fork(3).normal(), before);
        assert_ne!(parent.fork(4).normal(), before);
    }
}
