//! Seedable RNG and weight initialization.
//!
//! ChaCha8 keeps draws bit-stable across platforms and crate versions, which
//! the reproducibility contracts rely on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Prng {
    inner: ChaCha8Rng,
}

impl Prng {
    pub fn seed_from(seed: u64) -> Self {
        Prng { inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Derive an independent stream, e.g. one per parameter or per epoch.
    pub fn derive(&self, stream: u64) -> Self {
        let mut inner = self.inner.clone();
        inner.set_stream(stream);
        Prng { inner }
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        // Box-Muller; rejection below keeps draws away from log(0).
        loop {
            let u1: f64 = self.inner.gen();
            let u2: f64 = self.inner.gen();
            if u1 > f64::MIN_POSITIVE {
                return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            }
        }
    }

    /// Normal(0, std) truncated at +/- 2 std, the ViT-lineage init.
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    pub fn gen_range(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Fisher-Yates shuffle of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.inner.gen_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }
}
