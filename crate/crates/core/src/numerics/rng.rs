use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Seeded random stream. Equal `(seed, stream_id)` pairs replay the same draws.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Independent child stream, derived deterministically from this stream's identity.
    pub fn fork(&self, child: u64) -> RngStream {
        let mixed = self
            .stream_id
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .rotate_left(17)
            ^ child.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        RngStream::new(self.seed ^ 0x5851_F42D_4C95_7F2D, mixed)
    }

    pub fn standard_normal<T: Scalar>(&mut self) -> T {
        let z: f64 = self.rng.sample(StandardNormal);
        T::lit(z)
    }

    pub fn gaussian<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        Tensor::from_fn(shape, |_| self.standard_normal())
    }

    pub fn uniform_f64(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn uniform_int(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.random_range(lo..=hi)
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::lit(lo + (hi - lo) * self.uniform_f64()))
    }

    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        // Fisher-Yates through our own draws keeps the order tied to the stream.
        for i in (1..items.len()).rev() {
            let j = self.uniform_int(0, i);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_of_a_million_draws() {
        let mut s = RngStream::new(7, 0);
        let t: Tensor<f64> = s.gaussian(&[1_000_000]);
        let mean = t.mean();
        let var = t
            .data()
            .iter()
            .map(|x| (x - mean) * (x - mean))
            .sum::<f64>()
            / t.len() as f64;
        assert!(mean.abs() < 0.01);
        assert!((var - 1.0).abs() < 0.01);
    }

    #[test]
    fn same_stream_replays() {
        let a: Tensor<f64> = RngStream::new(3, 9).gaussian(&[4, 5]);
        let b: Tensor<f64> = RngStream::new(3, 9).gaussian(&[4, 5]);
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_streams_differ() {
        let a: Tensor<f64> = RngStream::new(3, 1).gaussian(&[16]);
        let b: Tensor<f64> = RngStream::new(3, 2).gaussian(&[16]);
        assert_ne!(a, b);
        let c: Tensor<f64> = RngStream::new(3, 1).fork(0).gaussian(&[16]);
        let d: Tensor<f64> = RngStream::new(3, 1).fork(1).gaussian(&[16]);
        assert_ne!(c, d);
    }
}
