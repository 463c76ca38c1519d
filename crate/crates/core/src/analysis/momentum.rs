use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problems::Problem;

pub const MIN_USABLE_INCREMENTS: usize = 1_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentumParams {
    /// Number of past gradients the kernel regression uses.
    pub lags: usize,
    /// Leading kernel weights the momentum ratio is fitted over.
    pub fit_lags: usize,
    /// Fraction of the trace discarded as warmup.
    pub warmup: f64,
    /// Contiguous blocks used for the standard error.
    pub blocks: usize,
}

impl Default for MomentumParams {
    fn default() -> Self {
        MomentumParams { lags: 30, fit_lags: 15, warmup: 0.1, blocks: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentumEstimate {
    pub mu: f64,
    pub stderr: f64,
    /// Estimated drift kernel `ŵ(0..lags)`.
    pub kernel: Vec<f64>,
    pub usable_increments: usize,
    pub params: MomentumParams,
}

/// Streaming least squares: keeps the triangular factor of `[X | y]`.
#[derive(Clone)]
struct Tsqr {
    cols: usize,
    r: Option<DMatrix<f64>>,
}

impl Tsqr {
    fn new(cols: usize) -> Self {
        Tsqr { cols, r: None }
    }

    /// `block` is row-major with `cols + 1` entries per row, the target last.
    fn push(&mut self, block: &[f64]) {
        let width = self.cols + 1;
        let n = block.len() / width;
        if n == 0 {
            return;
        }
        let top = self.r.as_ref().map_or(0, |r| r.nrows());
        let mut m = DMatrix::zeros(top + n, width);
        if let Some(r) = &self.r {
            m.view_mut((0, 0), (top, width)).copy_from(r);
        }
        for i in 0..n {
            for j in 0..width {
                m[(top + i, j)] = block[i * width + j];
            }
        }
        let r = m.qr().r();
        let keep = r.nrows().min(width);
        self.r = Some(r.rows(0, keep).into_owned());
    }

    fn merge(&mut self, other: &Tsqr) {
        if let Some(r) = &other.r {
            let flat: Vec<f64> = (0..r.nrows()).flat_map(|i| (0..r.ncols()).map(move |j| r[(i, j)])).collect();
            self.push(&flat);
        }
    }

    fn solve(&self) -> Result<Vec<f64>> {
        let k = self.cols;
        let r = self.r.as_ref().ok_or_else(|| Error::Estimation("no regression rows".into()))?;
        if r.nrows() < k {
            return Err(Error::Estimation("fewer rows than regressors".into()));
        }
        let rr = r.view((0, 0), (k, k)).into_owned();
        let rhs = r.view((0, k), (k, 1)).into_owned();
        let diag_max = (0..k).map(|i| rr[(i, i)].abs()).fold(0.0, f64::max);
        if (0..k).any(|i| rr[(i, i)].abs() <= 1e-13 * diag_max) {
            return Err(Error::Estimation("lagged gradients are collinear; kernel is not identifiable".into()));
        }
        let sol = rr
            .solve_upper_triangular(&rhs)
            .ok_or_else(|| Error::Estimation("singular triangular factor".into()))?;
        Ok(sol.iter().copied().collect())
    }
}

/// Regression rows for `t` in `range`: target `−Δ_{t+1}[j]`, regressors
/// `g_t[j]` and `g_{t−k}[j] − g_{t−k+1}[j]` for `k = 1..lags`. Their
/// coefficients are the tail sums `W(k) = Σ_{i≥k} w(i)`.
fn rows(increments: &[Vec<f64>], grads: &[Vec<f64>], lags: usize, range: std::ops::Range<usize>) -> Vec<f64> {
    let d = grads[0].len();
    let width = lags + 1;
    let mut out = Vec::with_capacity(range.len() * d * width);
    for t in range {
        for j in 0..d {
            out.push(grads[t][j]);
            for k in 1..lags {
                out.push(grads[t - k][j] - grads[t - k + 1][j]);
            }
            out.push(-increments[t][j]);
        }
    }
    out
}

fn tail_sums_to_kernel(tails: &[f64]) -> Vec<f64> {
    (0..tails.len()).map(|k| tails[k] - tails.get(k + 1).copied().unwrap_or(0.0)).collect()
}

/// Least-squares ratio `Σ w(i)w(i+1) / Σ w(i)²` over the first `fit_lags` weights.
pub fn kernel_ratio(kernel: &[f64], fit_lags: usize) -> f64 {
    let n = fit_lags.min(kernel.len().saturating_sub(1));
    let num: f64 = (0..n).map(|i| kernel[i] * kernel[i + 1]).sum();
    let den: f64 = (0..n).map(|i| kernel[i] * kernel[i]).sum();
    num / den
}

/// Fits `Δ_{t+1} = −Σ_{k<lags} w(k)·g_{t−k}` pooled over coordinates, where
/// `increments[t] = x_{t+1} − x_t` and `grads[t] = ∇f(x_t)`. Rows with
/// `t < lags − 1` are dropped.
pub fn fit_drift_kernel(increments: &[Vec<f64>], grads: &[Vec<f64>], lags: usize) -> Result<Vec<f64>> {
    check_shapes(increments, grads, lags)?;
    let mut q = Tsqr::new(lags);
    for chunk in chunked(lags - 1..increments.len(), 2048) {
        q.push(&rows(increments, grads, lags, chunk));
    }
    Ok(tail_sums_to_kernel(&q.solve()?))
}

fn check_shapes(increments: &[Vec<f64>], grads: &[Vec<f64>], lags: usize) -> Result<()> {
    if lags < 2 {
        return Err(Error::Parameter("at least two lags are needed".into()));
    }
    if increments.len() != grads.len() || grads.is_empty() {
        return Err(Error::Input("increments and gradients must have the same non-zero length".into()));
    }
    let d = grads[0].len();
    if increments.iter().chain(grads).any(|v| v.len() != d) {
        return Err(Error::Input("inconsistent dimensions".into()));
    }
    Ok(())
}

fn chunked(r: std::ops::Range<usize>, size: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    let end = r.end;
    (r.start..end).step_by(size).map(move |s| s..(s + size).min(end))
}

/// Implicit momentum of an SGD trajectory `x_0, …, x_T`.
///
/// The expected increment is a weighted sum of exact gradients at past
/// iterates; the weights are estimated by a distributed-lag regression and
/// the momentum is their geometric decay ratio. The standard error comes from
/// the spread of the estimate over contiguous blocks.
pub fn estimate_implicit_momentum(
    iterates: &[Vec<f64>],
    problem: &Problem,
    params: MomentumParams,
) -> Result<MomentumEstimate> {
    if !(0.0..1.0).contains(&params.warmup) {
        return Err(Error::Parameter(format!("warmup fraction must lie in [0, 1), got {}", params.warmup)));
    }
    if params.fit_lags == 0 || params.fit_lags >= params.lags {
        return Err(Error::Parameter("fit_lags must lie in 1..lags".into()));
    }
    if params.blocks < 2 {
        return Err(Error::Parameter("at least two blocks are needed for a standard error".into()));
    }
    let t_total = iterates.len().saturating_sub(1);
    let start = ((params.warmup * t_total as f64).ceil() as usize).max(params.lags - 1);
    let usable = t_total.saturating_sub(start);
    if usable < MIN_USABLE_INCREMENTS {
        return Err(Error::Estimation(format!(
            "{usable} usable increments after warmup, at least {MIN_USABLE_INCREMENTS} are needed"
        )));
    }
    let d = problem.dim();
    if iterates.iter().any(|x| x.len() != d) {
        return Err(Error::Input(format!("iterates must have the problem dimension {d}")));
    }
    let increments: Vec<Vec<f64>> =
        iterates.windows(2).map(|p| p[1].iter().zip(&p[0]).map(|(a, b)| a - b).collect()).collect();
    let mut grads = Vec::with_capacity(t_total);
    for x in &iterates[..t_total] {
        let mut g = vec![0.0; d];
        problem.full_grad(x, &mut g)?;
        grads.push(g);
    }

    let block_len = usable.div_ceil(params.blocks);
    let mut total = Tsqr::new(params.lags);
    let mut per_block = Vec::with_capacity(params.blocks);
    for b in 0..params.blocks {
        let lo = start + b * block_len;
        let hi = (lo + block_len).min(t_total);
        if lo >= hi {
            continue;
        }
        let mut q = Tsqr::new(params.lags);
        for chunk in chunked(lo..hi, 2048) {
            q.push(&rows(&increments, &grads, params.lags, chunk));
        }
        if let Ok(tails) = q.solve() {
            per_block.push(kernel_ratio(&tail_sums_to_kernel(&tails), params.fit_lags));
        }
        total.merge(&q);
    }
    let kernel = tail_sums_to_kernel(&total.solve()?);
    let mu = kernel_ratio(&kernel, params.fit_lags);
    let stderr = if per_block.len() >= 2 {
        let n = per_block.len() as f64;
        let mean = per_block.iter().sum::<f64>() / n;
        (per_block.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
    } else {
        f64::NAN
    };
    Ok(MomentumEstimate { mu, stderr, kernel, usable_increments: usable, params })
}
