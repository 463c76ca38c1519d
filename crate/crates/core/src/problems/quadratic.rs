use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Assumption constants of a strongly convex problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    /// Strong convexity parameter, `λ_min(A)`.
    pub c: f64,
    /// Lipschitz constant of the gradient, `λ_max(A)`.
    pub l: f64,
    /// Bound on `sqrt(E‖∇F‖²)` over the ball of radius `radius` around `x*`.
    pub m: f64,
    pub radius: f64,
    pub x_star: Vec<f64>,
}

/// `f(x) = ½ (x − x*)ᵀ A (x − x*)` with `A = Q diag(spectrum) Qᵀ` and additive
/// isotropic Gaussian gradient noise of standard deviation `sigma`.
#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    spectrum: Vec<f64>,
    a: DMatrix<f64>,
    x_star: DVector<f64>,
    x0: DVector<f64>,
    sigma: f64,
}

impl QuadraticProblem {
    /// `rotation_seed = None` keeps `A` diagonal.
    pub fn new(
        spectrum: Vec<f64>,
        rotation_seed: Option<u64>,
        x_star: Option<Vec<f64>>,
        x0: Option<Vec<f64>>,
        sigma: f64,
    ) -> Result<Self> {
        let d = spectrum.len();
        if d == 0 {
            return Err(Error::Parameter("quadratic spectrum must be non-empty".into()));
        }
        if let Some(bad) = spectrum.iter().find(|&&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::Parameter(format!("eigenvalues must be positive, got {bad}")));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Parameter(format!("noise σ must be non-negative, got {sigma}")));
        }
        let vec_or = |v: Option<Vec<f64>>, default: f64, what: &str| -> Result<DVector<f64>> {
            match v {
                None => Ok(DVector::from_element(d, default)),
                Some(v) if v.len() == d => Ok(DVector::from_vec(v)),
                Some(v) => Err(Error::Input(format!("{what} has dimension {}, expected {d}", v.len()))),
            }
        };
        let x_star = vec_or(x_star, 0.0, "x*")?;
        let x0 = vec_or(x0, 1.0, "x0")?;
        let diag = DMatrix::from_diagonal(&DVector::from_column_slice(&spectrum));
        let a = match rotation_seed {
            None => diag,
            Some(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
                let q = g.qr().q();
                let a = &q * diag * q.transpose();
                // Symmetrize away rounding.
                (&a + a.transpose()) * 0.5
            }
        };
        Ok(QuadraticProblem { spectrum, a, x_star, x0, sigma })
    }

    pub fn dim(&self) -> usize {
        self.spectrum.len()
    }

    pub fn spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn x_star(&self) -> &[f64] {
        self.x_star.as_slice()
    }

    pub fn x0(&self) -> &[f64] {
        self.x0.as_slice()
    }

    pub fn loss(&self, x: &[f64]) -> f64 {
        let e = DVector::from_column_slice(x) - &self.x_star;
        0.5 * e.dot(&(&self.a * &e))
    }

    /// Exact gradient `A(x − x*)`.
    pub fn full_grad(&self, x: &[f64], out: &mut [f64]) {
        let e = DVector::from_column_slice(x) - &self.x_star;
        out.copy_from_slice((&self.a * e).as_slice());
    }

    pub fn grad<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R, out: &mut [f64]) {
        self.full_grad(x, out);
        if self.sigma > 0.0 {
            for o in out.iter_mut() {
                *o += self.sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }

    /// `c = λ_min`, `L = λ_max`, `M = sqrt(L² R² + d σ²)`, with `R` defaulting
    /// to `‖x0 − x*‖`.
    pub fn constants(&self, radius: Option<f64>) -> Result<Constants> {
        let radius = radius.unwrap_or_else(|| (&self.x0 - &self.x_star).norm());
        if !(radius >= 0.0 && radius.is_finite()) {
            return Err(Error::Parameter(format!("radius must be non-negative, got {radius}")));
        }
        let c = self.spectrum.iter().copied().fold(f64::INFINITY, f64::min);
        let l = self.spectrum.iter().copied().fold(0.0, f64::max);
        let m = (l * l * radius * radius + self.dim() as f64 * self.sigma * self.sigma).sqrt();
        Ok(Constants { c, l, m, radius, x_star: self.x_star.as_slice().to_vec() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gradient_vanishes_at_optimum() {
        let q = QuadraticProblem::new(vec![1.0, 3.0, 7.0], Some(5), Some(vec![0.5, -1.0, 2.0]), None, 0.0).unwrap();
        let mut g = vec![1.0; 3];
        q.grad(q.x_star(), &mut ChaCha8Rng::seed_from_u64(0), &mut g);
        assert!(g.iter().all(|&v| v.abs() < 1e-14));
        assert_eq!(q.loss(q.x_star()), 0.0);
    }

    #[test]
    fn identity_loss() {
        let q = QuadraticProblem::new(vec![1.0, 1.0], None, None, None, 0.0).unwrap();
        assert_relative_eq!(q.loss(&[3.0, 4.0]), 12.5);
    }

    #[test]
    fn constants_examples() {
        let unit = Some(vec![1.0, 0.0]);
        let q = QuadraticProblem::new(vec![1.0, 1.0], None, None, unit.clone(), 0.0).unwrap();
        let k = q.constants(Some(1.0)).unwrap();
        assert_eq!((k.c, k.l, k.m), (1.0, 1.0, 1.0));
        let q = QuadraticProblem::new(vec![1.0, 4.0], None, None, unit.clone(), 0.0).unwrap();
        let k = q.constants(None).unwrap();
        assert_eq!((k.c, k.l, k.m), (1.0, 4.0, 4.0));
        let q = QuadraticProblem::new(vec![1.0, 1.0], None, None, unit, 0.1).unwrap();
        assert_relative_eq!(q.constants(Some(1.0)).unwrap().m, 1.02f64.sqrt(), max_relative = 1e-15);
        assert_relative_eq!(q.constants(Some(1.0)).unwrap().m, 1.00995, epsilon = 1e-5);
    }

    #[test]
    fn rotation_preserves_spectrum() {
        let q = QuadraticProblem::new(vec![50.0, 100.0, 150.0, 200.0], Some(9), None, None, 0.0).unwrap();
        let mut eig: Vec<f64> = q.matrix().clone().symmetric_eigen().eigenvalues.iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        for (a, b) in eig.iter().zip([50.0, 100.0, 150.0, 200.0]) {
            assert_relative_eq!(*a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(QuadraticProblem::new(vec![], None, None, None, 0.0).is_err());
        assert!(QuadraticProblem::new(vec![1.0, 0.0], None, None, None, 0.0).is_err());
        assert!(QuadraticProblem::new(vec![1.0], None, Some(vec![0.0, 0.0]), None, 0.0).is_err());
        assert!(QuadraticProblem::new(vec![1.0], None, None, None, -1.0).is_err());
    }
}
