use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;

/// Seeded, counter-addressable random stream.
///
/// Backed by ChaCha8, whose keystream position is the `counter`: a stream
/// can be rebuilt at any point from `(seed, counter)` alone, which is what
/// checkpoints persist.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent child stream, e.g. one per sampling chain.
    pub fn derive(seed: u64, index: u64) -> Self {
        Self::new(splitmix64(seed ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D))))
    }

    /// Rebuilds a stream at a saved position.
    pub fn at(seed: u64, counter: u64) -> Self {
        let mut s = Self::new(seed);
        s.rng.set_word_pos(counter as u128);
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of 32-bit keystream words consumed so far.
    pub fn counter(&self) -> u64 {
        self.rng.get_word_pos() as u64
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| lo + (hi - lo) * self.uniform()).collect()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn uniform_int(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.random_range(lo..=hi)
    }

    /// `true` with probability `p`.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// One standard normal draw by Box–Muller (cosine branch). Consumes
    /// exactly two 64-bit words, so draws concatenate across calls.
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }
}

/// `n` independent standard normal draws from `rng`.
pub fn sample_standard_normal(rng: &mut RngStream, n: usize) -> Tensor {
    Tensor::from_vec(rng.normal_vec(n))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}
