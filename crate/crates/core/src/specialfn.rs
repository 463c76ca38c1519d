//! Log-space special functions used by the staleness models and the adaptive
//! step-size formulas.
//!
//! Everything that involves `λ^i / (i!)^ν` is evaluated as
//! `exp(i·ln λ − ν·ln i!)`; `i!` overflows `f64` at `i = 171`, well inside the
//! staleness range the engines produce.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Maximum number of series terms summed before giving up.
pub const MAX_SERIES_TERMS: usize = 10_000;

/// Relative size of a term, compared to the running sum, below which a
/// convergent series is considered finished.
const SERIES_REL_TOL: f64 = 1e-15;

const FACTORIALS: [u64; 21] = {
    let mut table = [1u64; 21];
    let mut i = 1;
    while i < 21 {
        table[i] = table[i - 1] * i as u64;
        i += 1;
    }
    table
};

/// `ln(n!)`. Exact (integer factorial, then one log) for `n ≤ 20`, log-gamma beyond.
pub fn log_factorial(n: u64) -> f64 {
    if n <= 20 {
        (FACTORIALS[n as usize] as f64).ln()
    } else {
        ln_gamma(n as f64 + 1.0)
    }
}

/// `ln(e^a + e^b)` without overflow. Either argument may be `-inf`.
pub fn ln_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `ln(λ^i / (i!)^ν)`.
#[inline]
pub fn ln_cmp_term(ln_lambda: f64, nu: f64, i: u64) -> f64 {
    i as f64 * ln_lambda - nu * log_factorial(i)
}

/// Index after which the terms `λ^i/(i!)^ν` are strictly decreasing.
fn series_mode(lambda: f64, nu: f64) -> u64 {
    let m = lambda.powf(1.0 / nu);
    if m.is_finite() && m < u64::MAX as f64 {
        m.floor() as u64
    } else {
        u64::MAX
    }
}

/// The normalizing constant `Z(λ, ν) = Σ_j λ^j / (j!)^ν` of the CMP distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CmpNormalizer {
    pub lambda: f64,
    pub nu: f64,
    /// `ln Z`; always finite for converged series.
    pub ln_value: f64,
    /// `Z` itself, `+inf` if it does not fit in an `f64`.
    pub value: f64,
    pub terms_used: usize,
    /// Upper bound on the omitted tail mass, relative to `Z`.
    pub rel_truncation_error: f64,
}

/// Sums the CMP series until the current term drops below `1e-15` of the
/// partial sum (and the terms are past the mode), or `MAX_SERIES_TERMS` terms.
pub fn cmp_normalizer(lambda: f64, nu: f64) -> Result<CmpNormalizer> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::Parameter(format!("CMP λ must be positive, got {lambda}")));
    }
    if !(nu > 0.0) || !nu.is_finite() {
        return Err(Error::Parameter(format!("CMP ν must be positive, got {nu}")));
    }
    let ln_lambda = lambda.ln();
    let mode = series_mode(lambda, nu);
    let ln_tol = SERIES_REL_TOL.ln();

    let mut ln_sum = f64::NEG_INFINITY;
    for i in 0..MAX_SERIES_TERMS as u64 {
        let ln_term = ln_cmp_term(ln_lambda, nu, i);
        ln_sum = ln_add_exp(ln_sum, ln_term);
        if i > mode && ln_term - ln_sum < ln_tol {
            // Past the mode the term ratio λ/(j+1)^ν is decreasing, so the
            // tail is dominated by a geometric series with the next ratio.
            let ratio = lambda / ((i + 1) as f64).powf(nu);
            let rel_truncation_error = (ln_term - ln_sum).exp() * ratio / (1.0 - ratio);
            return Ok(CmpNormalizer {
                lambda,
                nu,
                ln_value: ln_sum,
                value: ln_sum.exp(),
                terms_used: i as usize + 1,
                rel_truncation_error,
            });
        }
    }
    Err(Error::Numeric {
        what: "cmp_normalizer",
        detail: format!(
            "series for λ={lambda}, ν={nu} not converged after {MAX_SERIES_TERMS} terms (mode {mode}, ln partial sum {ln_sum:.3})"
        ),
    })
}

/// `ln Σ_{j=0}^{τ−1} λ^j/(j!)^ν`; `-inf` for `τ = 0`.
pub fn ln_cmp_head_sum(lambda: f64, nu: f64, tau: u64) -> f64 {
    let ln_lambda = lambda.ln();
    (0..tau).fold(f64::NEG_INFINITY, |acc, j| {
        ln_add_exp(acc, ln_cmp_term(ln_lambda, nu, j))
    })
}

/// `ln Σ_{j≥τ} λ^j/(j!)^ν`, truncated like [`cmp_normalizer`].
pub fn ln_cmp_tail_sum(lambda: f64, nu: f64, tau: u64) -> f64 {
    let ln_lambda = lambda.ln();
    let mode = series_mode(lambda, nu);
    let ln_tol = SERIES_REL_TOL.ln() - 5.0;
    let mut ln_sum = f64::NEG_INFINITY;
    let mut j = tau;
    loop {
        let ln_term = ln_cmp_term(ln_lambda, nu, j);
        ln_sum = ln_add_exp(ln_sum, ln_term);
        if (j > mode && ln_term - ln_sum < ln_tol) || j - tau >= MAX_SERIES_TERMS as u64 {
            return ln_sum;
        }
        j += 1;
    }
}

/// Regularized upper incomplete gamma `Q(τ, λ) = Γ(τ, λ)/Γ(τ)` for integer `τ`,
/// via `Q(τ, λ) = e^{−λ} Σ_{j<τ} λ^j/j!` (the Poisson CDF at `τ − 1`).
///
/// `Q(0, λ) = 0` (empty sum).
pub fn regularized_upper_gamma(tau: u64, lambda: f64) -> f64 {
    if tau == 0 {
        return 0.0;
    }
    let ln_lambda = lambda.ln();
    let sum: f64 = (0..tau)
        .map(|j| (ln_cmp_term(ln_lambda, 1.0, j) - lambda).exp())
        .sum();
    sum.min(1.0)
}

/// `ln(1 − Q(τ, λ)) = ln P[N ≥ τ]` for `N ~ Poisson(λ)`, accurate deep into the tail.
pub fn ln_poisson_upper_tail(tau: u64, lambda: f64) -> f64 {
    if tau == 0 {
        return 0.0;
    }
    let q = regularized_upper_gamma(tau, lambda);
    if q < 0.5 {
        (-q).ln_1p()
    } else {
        ln_cmp_tail_sum(lambda, 1.0, tau) - lambda
    }
}
