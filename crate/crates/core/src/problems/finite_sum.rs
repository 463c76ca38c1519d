use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Draws `b` distinct indices out of `0..n`, uniformly.
pub fn sample_batch<R: Rng + ?Sized>(rng: &mut R, n: usize, b: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, b).into_vec()
}

/// Least squares `f_D(x) = (1/n) Σ (aᵢᵀx − bᵢ)²` over a synthetic dataset.
#[derive(Debug, Clone)]
pub struct FiniteSumProblem {
    n: usize,
    d: usize,
    /// Row-major `n × d`.
    features: Vec<f64>,
    targets: Vec<f64>,
    batch: usize,
    x_star: Vec<f64>,
}

impl FiniteSumProblem {
    /// Gaussian features, targets `aᵢᵀx_true + noise·ξᵢ`.
    pub fn synthetic(n: usize, d: usize, batch: usize, noise: f64, seed: u64) -> Result<Self> {
        if d == 0 {
            return Err(Error::Parameter("dimension must be positive".into()));
        }
        if !(noise >= 0.0 && noise.is_finite()) {
            return Err(Error::Parameter(format!("target noise must be non-negative, got {noise}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x_true: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let features: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
        let targets = (0..n)
            .map(|i| {
                let row = &features[i * d..(i + 1) * d];
                dot(row, &x_true) + noise * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        Self::from_data(features, targets, d, batch)
    }

    pub fn from_data(features: Vec<f64>, targets: Vec<f64>, d: usize, batch: usize) -> Result<Self> {
        let n = targets.len();
        if d == 0 || features.len() != n * d {
            return Err(Error::Input(format!(
                "feature matrix has {} entries, expected {n} × {d}",
                features.len()
            )));
        }
        if batch == 0 || batch > n {
            return Err(Error::Input(format!("batch size {batch} must lie in 1..={n}")));
        }
        let a = DMatrix::from_row_slice(n, d, &features);
        let normal = a.transpose() * &a;
        let rhs = a.transpose() * DVector::from_column_slice(&targets);
        let x_star = normal
            .cholesky()
            .ok_or_else(|| Error::Input("design matrix is rank deficient; optimum is not unique".into()))?
            .solve(&rhs);
        Ok(FiniteSumProblem { n, d, features, targets, batch, x_star: x_star.as_slice().to_vec() })
    }

    pub fn with_batch(mut self, batch: usize) -> Result<Self> {
        if batch == 0 || batch > self.n {
            return Err(Error::Input(format!("batch size {batch} must lie in 1..={}", self.n)));
        }
        self.batch = batch;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn x_star(&self) -> &[f64] {
        &self.x_star
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    pub fn loss(&self, x: &[f64]) -> f64 {
        (0..self.n).map(|i| (dot(self.row(i), x) - self.targets[i]).powi(2)).sum::<f64>() / self.n as f64
    }

    /// Gradient of the mean loss over `batch`.
    pub fn batch_grad(&self, x: &[f64], batch: &[usize], out: &mut [f64]) {
        out.fill(0.0);
        for &i in batch {
            let row = self.row(i);
            let r = 2.0 * (dot(row, x) - self.targets[i]);
            for (o, a) in out.iter_mut().zip(row) {
                *o += r * a;
            }
        }
        let scale = 1.0 / batch.len() as f64;
        out.iter_mut().for_each(|o| *o *= scale);
    }

    pub fn full_grad(&self, x: &[f64], out: &mut [f64]) {
        let all: Vec<usize> = (0..self.n).collect();
        self.batch_grad(x, &all, out);
    }

    pub fn grad<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R, out: &mut [f64]) {
        let batch = sample_batch(rng, self.n, self.batch);
        self.batch_grad(x, &batch, out);
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn optimum_has_zero_full_gradient() {
        let p = FiniteSumProblem::synthetic(64, 8, 4, 0.5, 3).unwrap();
        let mut g = vec![0.0; 8];
        p.full_grad(p.x_star(), &mut g);
        assert!(g.iter().all(|v| v.abs() < 1e-10), "{g:?}");
        let mut bumped = p.x_star().to_vec();
        bumped[0] += 0.1;
        assert!(p.loss(&bumped) > p.loss(p.x_star()));
    }

    #[test]
    fn noiseless_optimum_recovers_zero_loss() {
        let p = FiniteSumProblem::synthetic(32, 3, 4, 0.0, 1).unwrap();
        assert!(p.loss(p.x_star()) < 1e-20);
    }

    #[test]
    fn batch_bounds() {
        assert!(FiniteSumProblem::synthetic(8, 2, 9, 0.1, 0).is_err());
        assert!(FiniteSumProblem::synthetic(8, 2, 0, 0.1, 0).is_err());
        let p = FiniteSumProblem::synthetic(8, 2, 3, 0.1, 0).unwrap();
        assert!(p.clone().with_batch(8).is_ok());
        assert!(p.with_batch(9).is_err());
    }

    #[test]
    fn sampled_batches_are_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let mut b = sample_batch(&mut rng, 10, 6);
            b.sort_unstable();
            b.dedup();
            assert_eq!(b.len(), 6);
            assert!(b.iter().all(|&i| i < 10));
        }
    }

    #[test]
    fn small_example_loss() {
        // a = (1), (2); b = 1, 0; x = 1 → ((0)² + (2)²)/2 = 2
        let p = FiniteSumProblem::from_data(vec![1.0, 2.0], vec![1.0, 0.0], 1, 1).unwrap();
        assert_relative_eq!(p.loss(&[1.0]), 2.0);
        assert_relative_eq!(p.x_star()[0], 0.2);
    }
}
