use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::finite_sum::sample_batch;
use crate::error::{Error, Result};

pub const MAX_HIDDEN: usize = 64;

/// One-hidden-layer classifier (tanh, softmax, cross-entropy) on Gaussian blobs
/// in the plane.
///
/// Parameters are packed as `W1 (hidden × input, row-major), b1, W2 (classes ×
/// hidden, row-major), b2`.
#[derive(Debug, Clone)]
pub struct MlpProblem {
    input: usize,
    hidden: usize,
    classes: usize,
    /// Row-major `n × input`.
    features: Vec<f64>,
    labels: Vec<usize>,
    batch: usize,
    x0: Vec<f64>,
}

struct Layout {
    w1: std::ops::Range<usize>,
    b1: std::ops::Range<usize>,
    w2: std::ops::Range<usize>,
    b2: std::ops::Range<usize>,
}

impl MlpProblem {
    /// `n` points split evenly over `classes` blobs whose centres sit on a
    /// circle of radius `separation`, unit variance.
    pub fn blobs(n: usize, classes: usize, hidden: usize, separation: f64, batch: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Parameter("need at least two classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % classes;
            let angle = std::f64::consts::TAU * c as f64 / classes as f64;
            features.push(separation * angle.cos() + rng.sample::<f64, _>(StandardNormal));
            features.push(separation * angle.sin() + rng.sample::<f64, _>(StandardNormal));
            labels.push(c);
        }
        Self::from_data(features, labels, 2, hidden, classes, batch, seed.wrapping_add(1))
    }

    pub fn from_data(
        features: Vec<f64>,
        labels: Vec<usize>,
        input: usize,
        hidden: usize,
        classes: usize,
        batch: usize,
        init_seed: u64,
    ) -> Result<Self> {
        let n = labels.len();
        if !(1..=MAX_HIDDEN).contains(&hidden) {
            return Err(Error::Parameter(format!("hidden width must lie in 1..={MAX_HIDDEN}, got {hidden}")));
        }
        if input == 0 || features.len() != n * input {
            return Err(Error::Input("feature matrix does not match n × input".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
        }
        if batch == 0 || batch > n {
            return Err(Error::Input(format!("batch size {batch} must lie in 1..={n}")));
        }
        let mut p = MlpProblem { input, hidden, classes, features, labels, batch, x0: Vec::new() };
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let lay = p.layout();
        let mut x0 = vec![0.0; p.dim()];
        let s1 = (1.0 / input as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        x0[lay.w1].iter_mut().for_each(|w| *w = s1 * rng.sample::<f64, _>(StandardNormal));
        x0[lay.w2].iter_mut().for_each(|w| *w = s2 * rng.sample::<f64, _>(StandardNormal));
        p.x0 = x0;
        Ok(p)
    }

    pub fn with_batch(mut self, batch: usize) -> Result<Self> {
        if batch == 0 || batch > self.n() {
            return Err(Error::Input(format!("batch size {batch} must lie in 1..={}", self.n())));
        }
        self.batch = batch;
        Ok(self)
    }

    fn layout(&self) -> Layout {
        let (i, h, k) = (self.input, self.hidden, self.classes);
        let w1 = 0..h * i;
        let b1 = w1.end..w1.end + h;
        let w2 = b1.end..b1.end + k * h;
        let b2 = w2.end..w2.end + k;
        Layout { w1, b1, w2, b2 }
    }

    pub fn dim(&self) -> usize {
        self.hidden * (self.input + 1) + self.classes * (self.hidden + 1)
    }

    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.input..(i + 1) * self.input]
    }

    /// Hidden activations and log-probabilities for one input.
    fn forward(&self, x: &[f64], a: &[f64], hidden: &mut [f64], logp: &mut [f64]) {
        let lay = self.layout();
        let (w1, b1, w2, b2) = (&x[lay.w1], &x[lay.b1], &x[lay.w2], &x[lay.b2]);
        for j in 0..self.hidden {
            let z: f64 = b1[j] + w1[j * self.input..(j + 1) * self.input].iter().zip(a).map(|(w, v)| w * v).sum::<f64>();
            hidden[j] = z.tanh();
        }
        for c in 0..self.classes {
            logp[c] = b2[c] + w2[c * self.hidden..(c + 1) * self.hidden].iter().zip(&*hidden).map(|(w, h)| w * h).sum::<f64>();
        }
        let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logp.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        logp.iter_mut().for_each(|z| *z -= lse);
    }

    /// Class probabilities for every sample, row-major `n × classes`.
    pub fn predict(&self, x: &[f64]) -> Vec<f64> {
        let mut hidden = vec![0.0; self.hidden];
        let mut logp = vec![0.0; self.classes];
        let mut out = Vec::with_capacity(self.n() * self.classes);
        for i in 0..self.n() {
            self.forward(x, self.sample(i), &mut hidden, &mut logp);
            out.extend(logp.iter().map(|l| l.exp()));
        }
        out
    }

    /// Mean cross-entropy over the full dataset.
    pub fn loss(&self, x: &[f64]) -> f64 {
        let mut hidden = vec![0.0; self.hidden];
        let mut logp = vec![0.0; self.classes];
        let total: f64 = (0..self.n())
            .map(|i| {
                self.forward(x, self.sample(i), &mut hidden, &mut logp);
                -logp[self.labels[i]]
            })
            .sum();
        total / self.n() as f64
    }

    /// Fraction of samples whose most probable class is the label.
    pub fn accuracy(&self, x: &[f64]) -> f64 {
        let mut hidden = vec![0.0; self.hidden];
        let mut logp = vec![0.0; self.classes];
        let hits = (0..self.n())
            .filter(|&i| {
                self.forward(x, self.sample(i), &mut hidden, &mut logp);
                let best = (0..self.classes).max_by(|&a, &b| logp[a].total_cmp(&logp[b])).unwrap();
                best == self.labels[i]
            })
            .count();
        hits as f64 / self.n() as f64
    }

    /// Backpropagated gradient of the mean cross-entropy over `batch`.
    pub fn batch_grad(&self, x: &[f64], batch: &[usize], out: &mut [f64]) {
        let lay = self.layout();
        let (h, k, inp) = (self.hidden, self.classes, self.input);
        let w2 = &x[lay.w2.clone()];
        let mut hidden = vec![0.0; h];
        let mut logp = vec![0.0; k];
        let mut delta1 = vec![0.0; h];
        out.fill(0.0);
        for &i in batch {
            let a = self.sample(i);
            self.forward(x, a, &mut hidden, &mut logp);
            delta1.fill(0.0);
            for c in 0..k {
                let d2 = logp[c].exp() - if c == self.labels[i] { 1.0 } else { 0.0 };
                out[lay.b2.start + c] += d2;
                for j in 0..h {
                    out[lay.w2.start + c * h + j] += d2 * hidden[j];
                    delta1[j] += w2[c * h + j] * d2;
                }
            }
            for j in 0..h {
                let d1 = delta1[j] * (1.0 - hidden[j] * hidden[j]);
                out[lay.b1.start + j] += d1;
                for (q, v) in a.iter().enumerate() {
                    out[lay.w1.start + j * inp + q] += d1 * v;
                }
            }
        }
        let scale = 1.0 / batch.len() as f64;
        out.iter_mut().for_each(|o| *o *= scale);
    }

    pub fn full_grad(&self, x: &[f64], out: &mut [f64]) {
        let all: Vec<usize> = (0..self.n()).collect();
        self.batch_grad(x, &all, out);
    }

    pub fn grad<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R, out: &mut [f64]) {
        let batch = sample_batch(rng, self.n(), self.batch);
        self.batch_grad(x, &batch, out);
    }
}
