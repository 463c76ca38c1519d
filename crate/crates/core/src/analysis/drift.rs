use serde::Serialize;

use crate::distributions::StalenessModel;
use crate::error::{Error, Result};
use crate::steppolicy::{implied_momentum, StepPolicy, StepSize};

/// Which identity a (model, policy) pair is expected to satisfy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DriftClaim {
    /// `w(i)` is constant: the drift term vanishes.
    Flat,
    /// `d(i) = K e^{−λ} p(i)`.
    KMomentum,
    /// `w(i+1) = μ·w(i)`.
    GeometricMomentum,
}

#[derive(Debug, Clone, Serialize)]
pub struct DriftCheck {
    pub claim: DriftClaim,
    /// The claimed constant: `w(0)` for flat, `K` for K-momentum, `μ` for geometric.
    pub claimed: f64,
    /// The measured counterpart: `w(I)`, `K` implied by `d(0)`, or `w(1)/w(0)`.
    pub measured: f64,
    /// Largest deviation from the identity over `i ≤ I`, relative to `w(0)`.
    pub residual: f64,
    /// `max |d(i)|` (absolute).
    pub max_abs_d: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DriftReport {
    pub model: StalenessModel,
    pub policy: StepPolicy,
    pub imax: u64,
    /// `w(i) = p(i)·α(i)`, `i = 0..=I`.
    pub w: Vec<f64>,
    /// `d(i) = w(i) − w(i+1)`, `i = 0..I`.
    pub d: Vec<f64>,
    /// `p(0)·α(0)`.
    pub leading: f64,
    pub check: Option<DriftCheck>,
    pub note: String,
}

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

fn cmp_params(model: &StalenessModel) -> Option<(f64, f64)> {
    match *model {
        StalenessModel::Cmp { lambda, nu } => Some((lambda, nu)),
        StalenessModel::Poisson { lambda } => Some((lambda, 1.0)),
        _ => None,
    }
}

/// Coefficients of the staleness-weighted gradient sum in the expected
/// asynchronous update, and a check of the identity the pair should satisfy.
pub fn drift_report(model: &StalenessModel, policy: &StepPolicy, imax: u64) -> Result<DriftReport> {
    if imax < 1 {
        return Err(Error::Parameter("I must be at least 1".into()));
    }
    policy.validate()?;
    let pmf = model.pmf_evaluator()?;
    let w: Vec<f64> = (0..=imax).map(|i| (pmf.ln_pmf(i) + policy.ln_step(i)).exp()).collect();
    let d: Vec<f64> = w.windows(2).map(|p| p[0] - p[1]).collect();
    if w.iter().chain(&d).any(|v| !v.is_finite()) {
        return Err(Error::Numeric { what: "drift coefficients", detail: "non-finite w(i)".into() });
    }
    let w0 = w[0];
    let max_abs_d = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let rel = |v: f64| if w0 > 0.0 { v / w0 } else { v };

    let check = match (*policy, model) {
        (StepPolicy::CmpZero { lambda, nu, .. }, m)
            if cmp_params(m).is_some_and(|(l, n)| same(l, lambda) && same(n, nu)) =>
        {
            let dev = w.iter().fold(0.0f64, |m, v| m.max((v - w0).abs()));
            Some(DriftCheck { claim: DriftClaim::Flat, claimed: w0, measured: w[imax as usize], residual: rel(dev), max_abs_d })
        }
        (StepPolicy::CmpTune { lambda, nu, k, .. }, m)
            if cmp_params(m).is_some_and(|(l, n)| same(l, lambda) && same(n, nu)) =>
        {
            Some(k_momentum(&d, &pmf, lambda, k, rel, max_abs_d))
        }
        (StepPolicy::PoissonTune { lambda, k, .. }, m)
            if cmp_params(m).is_some_and(|(l, n)| same(l, lambda) && n == 1.0) =>
        {
            Some(k_momentum(&d, &pmf, lambda, k, rel, max_abs_d))
        }
        (StepPolicy::GeometricTuned { p: pp, mu, .. }, StalenessModel::Geometric { p }) if same(pp, *p) => {
            Some(geometric(&w, mu, rel, max_abs_d))
        }
        (StepPolicy::Constant { .. }, StalenessModel::Geometric { p }) => {
            Some(geometric(&w, implied_momentum(*p, 1.0), rel, max_abs_d))
        }
        _ => None,
    };
    let note = match &check {
        Some(c) => match c.claim {
            DriftClaim::Flat => "p(i)·α(i) is constant: the drift term vanishes".to_string(),
            DriftClaim::KMomentum => "d(i) = K·e^{−λ}·p(i): momentum of magnitude K".to_string(),
            DriftClaim::GeometricMomentum => format!("geometric kernel with momentum {}", c.claimed),
        },
        None => "no theorem applies to this model/policy pair; raw sequences only".to_string(),
    };
    Ok(DriftReport { model: model.clone(), policy: *policy, imax, w, d, leading: w0, check, note })
}

fn k_momentum(
    d: &[f64],
    pmf: &crate::distributions::PmfEvaluator,
    lambda: f64,
    k: f64,
    rel: impl Fn(f64) -> f64,
    max_abs_d: f64,
) -> DriftCheck {
    let scale = (-lambda).exp();
    let dev = d
        .iter()
        .enumerate()
        .fold(0.0f64, |m, (i, di)| m.max((di - k * scale * pmf.pmf(i as u64)).abs()));
    let measured = d[0] / (scale * pmf.pmf(0));
    DriftCheck { claim: DriftClaim::KMomentum, claimed: k, measured, residual: rel(dev), max_abs_d }
}

fn geometric(w: &[f64], mu: f64, rel: impl Fn(f64) -> f64, max_abs_d: f64) -> DriftCheck {
    let dev = w.windows(2).fold(0.0f64, |m, p| m.max((p[1] - mu * p[0]).abs()));
    let measured = if w[0] > 0.0 { w[1] / w[0] } else { f64::NAN };
    DriftCheck { claim: DriftClaim::GeometricMomentum, claimed: mu, measured, residual: rel(dev), max_abs_d }
}
