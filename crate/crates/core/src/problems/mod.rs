//! Objective functions with stochastic gradient oracles.

mod finite_sum;
mod mlp;
mod quadratic;

pub use finite_sum::{sample_batch, FiniteSumProblem};
pub use mlp::{MlpProblem, MAX_HIDDEN};
pub use quadratic::{Constants, QuadraticProblem};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// JSON description of a problem. Datasets are regenerated from their seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProblemSpec {
    Quadratic {
        spectrum: Vec<f64>,
        #[serde(default)]
        rotation_seed: Option<u64>,
        #[serde(default)]
        x_star: Option<Vec<f64>>,
        #[serde(default)]
        x0: Option<Vec<f64>>,
        #[serde(default)]
        sigma: f64,
    },
    LeastSquares {
        n: usize,
        d: usize,
        batch: usize,
        noise: f64,
        data_seed: u64,
    },
    Mlp {
        n: usize,
        hidden: usize,
        classes: usize,
        separation: f64,
        batch: usize,
        data_seed: u64,
    },
}

impl ProblemSpec {
    /// `quad-1d`, `quad`, `lsq` or `mlp`.
    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "quad-1d" => ProblemSpec::Quadratic {
                spectrum: vec![1.0],
                rotation_seed: None,
                x_star: Some(vec![0.0]),
                x0: Some(vec![1.0]),
                sigma: 0.0,
            },
            "quad" => ProblemSpec::Quadratic {
                spectrum: vec![1.0, 2.0, 3.0, 4.0],
                rotation_seed: Some(0),
                x_star: None,
                x0: None,
                sigma: 0.1,
            },
            "lsq" => ProblemSpec::LeastSquares { n: 64, d: 8, batch: 8, noise: 0.1, data_seed: 0 },
            "mlp" => ProblemSpec::Mlp { n: 3000, hidden: 16, classes: 3, separation: 3.0, batch: 16, data_seed: 0 },
            other => {
                return Err(Error::Input(format!(
                    "unknown problem preset '{other}' (expected quad-1d, quad, lsq or mlp)"
                )))
            }
        })
    }

    pub fn with_batch(mut self, b: usize) -> Result<Self> {
        match &mut self {
            ProblemSpec::LeastSquares { batch, .. } | ProblemSpec::Mlp { batch, .. } => *batch = b,
            ProblemSpec::Quadratic { .. } => {
                return Err(Error::Unsupported("the quadratic problem has no mini-batch structure".into()))
            }
        }
        Ok(self)
    }

    pub fn with_data_seed(mut self, seed: u64) -> Self {
        match &mut self {
            ProblemSpec::LeastSquares { data_seed, .. } | ProblemSpec::Mlp { data_seed, .. } => *data_seed = seed,
            ProblemSpec::Quadratic { rotation_seed, .. } => {
                if rotation_seed.is_some() {
                    *rotation_seed = Some(seed)
                }
            }
        }
        self
    }

    pub fn build(&self) -> Result<Problem> {
        Ok(match self.clone() {
            ProblemSpec::Quadratic { spectrum, rotation_seed, x_star, x0, sigma } => {
                Problem::Quadratic(QuadraticProblem::new(spectrum, rotation_seed, x_star, x0, sigma)?)
            }
            ProblemSpec::LeastSquares { n, d, batch, noise, data_seed } => {
                Problem::FiniteSum(FiniteSumProblem::synthetic(n, d, batch, noise, data_seed)?)
            }
            ProblemSpec::Mlp { n, hidden, classes, separation, batch, data_seed } => {
                Problem::Mlp(MlpProblem::blobs(n, classes, hidden, separation, batch, data_seed)?)
            }
        })
    }
}

#[derive(Debug, Clone)]
pub enum Problem {
    Quadratic(QuadraticProblem),
    FiniteSum(FiniteSumProblem),
    Mlp(MlpProblem),
}

impl Problem {
    pub fn kind(&self) -> &'static str {
        match self {
            Problem::Quadratic(_) => "quadratic",
            Problem::FiniteSum(_) => "least-squares",
            Problem::Mlp(_) => "mlp",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Problem::Quadratic(p) => p.dim(),
            Problem::FiniteSum(p) => p.dim(),
            Problem::Mlp(p) => p.dim(),
        }
    }

    pub fn x0(&self) -> Vec<f64> {
        match self {
            Problem::Quadratic(p) => p.x0().to_vec(),
            Problem::FiniteSum(p) => vec![0.0; p.dim()],
            Problem::Mlp(p) => p.x0().to_vec(),
        }
    }

    /// The minimizer, when known in closed form.
    pub fn x_star(&self) -> Option<&[f64]> {
        match self {
            Problem::Quadratic(p) => Some(p.x_star()),
            Problem::FiniteSum(p) => Some(p.x_star()),
            Problem::Mlp(_) => None,
        }
    }

    /// Dataset size and batch size for finite-sum problems.
    pub fn data_shape(&self) -> Option<(usize, usize)> {
        match self {
            Problem::Quadratic(_) => None,
            Problem::FiniteSum(p) => Some((p.n(), p.batch())),
            Problem::Mlp(p) => Some((p.n(), p.batch())),
        }
    }

    /// `⌈n/b⌉` updates make one epoch.
    pub fn updates_per_epoch(&self) -> Option<u64> {
        self.data_shape().map(|(n, b)| n.div_ceil(b) as u64)
    }

    fn check_dim(&self, len: usize, what: &str) -> Result<()> {
        if len == self.dim() {
            Ok(())
        } else {
            Err(Error::Input(format!("{what} has dimension {len}, expected {}", self.dim())))
        }
    }

    pub fn loss(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x.len(), "x")?;
        Ok(match self {
            Problem::Quadratic(p) => p.loss(x),
            Problem::FiniteSum(p) => p.loss(x),
            Problem::Mlp(p) => p.loss(x),
        })
    }

    /// Stochastic gradient; deterministic given the rng state.
    pub fn grad<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R, out: &mut [f64]) -> Result<()> {
        self.check_dim(x.len(), "x")?;
        self.check_dim(out.len(), "gradient buffer")?;
        match self {
            Problem::Quadratic(p) => p.grad(x, rng, out),
            Problem::FiniteSum(p) => p.grad(x, rng, out),
            Problem::Mlp(p) => p.grad(x, rng, out),
        }
        Ok(())
    }

    /// Mean gradient over an explicit batch of sample indices.
    pub fn batch_grad(&self, x: &[f64], batch: &[usize], out: &mut [f64]) -> Result<()> {
        self.check_dim(x.len(), "x")?;
        self.check_dim(out.len(), "gradient buffer")?;
        let (n, _) = self
            .data_shape()
            .ok_or_else(|| Error::Unsupported(format!("the {} problem has no mini-batch structure", self.kind())))?;
        if batch.is_empty() || batch.iter().any(|&i| i >= n) {
            return Err(Error::Input(format!("batch indices must be non-empty and below {n}")));
        }
        match self {
            Problem::FiniteSum(p) => p.batch_grad(x, batch, out),
            Problem::Mlp(p) => p.batch_grad(x, batch, out),
            Problem::Quadratic(_) => unreachable!(),
        }
        Ok(())
    }

    /// Exact gradient `∇f(x)`.
    pub fn full_grad(&self, x: &[f64], out: &mut [f64]) -> Result<()> {
        self.check_dim(x.len(), "x")?;
        self.check_dim(out.len(), "gradient buffer")?;
        match self {
            Problem::Quadratic(p) => p.full_grad(x, out),
            Problem::FiniteSum(p) => p.full_grad(x, out),
            Problem::Mlp(p) => p.full_grad(x, out),
        }
        Ok(())
    }

    pub fn constants(&self, radius: Option<f64>) -> Result<Constants> {
        match self {
            Problem::Quadratic(p) => p.constants(radius),
            _ => Err(Error::Unsupported(format!("constants are only known for the quadratic, not {}", self.kind()))),
        }
    }

    pub fn dist2(&self, x: &[f64]) -> Option<f64> {
        self.x_star().map(|s| s.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn presets_build() {
        for name in ["quad-1d", "quad", "lsq", "mlp"] {
            let p = ProblemSpec::preset(name).unwrap().build().unwrap();
            assert_eq!(p.x0().len(), p.dim());
        }
        assert!(ProblemSpec::preset("cifar").is_err());
    }

    #[test]
    fn dimension_mismatch_is_an_input_error() {
        let p = ProblemSpec::preset("quad").unwrap().build().unwrap();
        let mut g = vec![0.0; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(p.grad(&[0.0; 3], &mut rng, &mut g), Err(Error::Input(_))));
        assert!(matches!(p.loss(&[0.0; 5]), Err(Error::Input(_))));
    }

    #[test]
    fn constants_only_for_quadratic() {
        let p = ProblemSpec::preset("lsq").unwrap().build().unwrap();
        assert!(matches!(p.constants(None), Err(Error::Unsupported(_))));
        let q = ProblemSpec::preset("quad").unwrap().build().unwrap();
        assert!(matches!(q.batch_grad(&[0.0; 4], &[0], &mut [0.0; 4]), Err(Error::Unsupported(_))));
        assert!(ProblemSpec::preset("quad").unwrap().with_batch(2).is_err());
    }

    #[test]
    fn spec_json_round_trip() {
        let spec = ProblemSpec::preset("mlp").unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains("\"kind\":\"mlp\""));
        assert_eq!(serde_json::from_str::<ProblemSpec>(&json).unwrap(), spec);
        let q: ProblemSpec = serde_json::from_str(r#"{"kind":"quadratic","spectrum":[1,2]}"#).unwrap();
        assert!(matches!(q, ProblemSpec::Quadratic { sigma, .. } if sigma == 0.0));
    }

    #[test]
    fn epochs() {
        let p = ProblemSpec::preset("lsq").unwrap().with_batch(6).unwrap().build().unwrap();
        assert_eq!(p.updates_per_epoch(), Some(11));
    }
}
