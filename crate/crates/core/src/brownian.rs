//! Seeded Brownian increments.
//!
//! Path `m` draws from `ChaCha8Rng::seed_from_u64(seed)` switched to stream
//! `m`, so each path's increments depend only on `(seed, m)` and never on how
//! paths are distributed over threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// Increments `ΔB[m][k]` stored row-major, `paths × steps`.
#[derive(Clone, Debug, PartialEq)]
pub struct Increments {
    pub paths: usize,
    pub steps: usize,
    pub dt: f64,
    pub seed: u64,
    pub data: Vec<f64>,
}

impl Increments {
    pub fn generate(seed: u64, paths: usize, steps: usize, dt: f64) -> Self {
        let mut data = vec![0.0; paths * steps];
        let sd = dt.sqrt();
        data.par_chunks_mut(steps).enumerate().for_each(|(m, row)| {
            let mut rng = path_rng(seed, m);
            for v in row.iter_mut() {
                let n: f64 = StandardNormal.sample(&mut rng);
                *v = sd * n;
            }
        });
        Increments {
            paths,
            steps,
            dt,
            seed,
            data,
        }
    }

    pub fn path(&self, m: usize) -> &[f64] {
        &self.data[m * self.steps..(m + 1) * self.steps]
    }

    pub fn at(&self, m: usize, k: usize) -> f64 {
        self.data[m * self.steps + k]
    }

    /// Column `k` across paths.
    pub fn step(&self, k: usize) -> Vec<f64> {
        (0..self.paths).map(|m| self.at(m, k)).collect()
    }
}

/// Generator for path `m`.
pub fn path_rng(seed: u64, m: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(m as u64);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moments_are_sane() {
        let (m, n, dt) = (4000, 10, 0.01);
        let inc = Increments::generate(11, m, n, dt);
        let total = (m * n) as f64;
        let mean = inc.data.iter().sum::<f64>() / total;
        let var = inc.data.iter().map(|v| v * v).sum::<f64>() / total;
        assert!(mean.abs() < 5.0 * (dt / total).sqrt());
        assert!((var - dt).abs() < 5.0 * dt * (2.0 / total).sqrt());
    }

    #[test]
    fn independent_of_thread_count() {
        let a = Increments::generate(3, 64, 5, 0.1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let b = pool.install(|| Increments::generate(3, 64, 5, 0.1));
        assert_eq!(a, b);
    }
}
