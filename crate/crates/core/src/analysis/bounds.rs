use serde::{Deserialize, Serialize};

use crate::distributions::StalenessModel;
use crate::error::{Error, Result};
use crate::steppolicy::StepSize;

/// Problem constants and targets shared by the bound calculators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundsInput {
    pub c: f64,
    pub l: f64,
    pub m: f64,
    /// Target squared distance `ε`.
    pub eps: f64,
    /// `‖x₀ − x*‖²`.
    pub d0: f64,
    /// Mean staleness `τ̄`.
    pub tau_bar: f64,
}

impl BoundsInput {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("c", self.c), ("L", self.l), ("M", self.m), ("ε", self.eps), ("‖x₀ − x*‖²", self.d0)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.tau_bar >= 0.0 && self.tau_bar.is_finite()) {
            return Err(Error::Parameter(format!("τ̄ must be non-negative, got {}", self.tau_bar)));
        }
        Ok(())
    }

    /// `M + 2L√ε·τ̄`.
    fn delay_factor(&self) -> f64 {
        self.m + 2.0 * self.l * self.eps.sqrt() * self.tau_bar
    }

    fn log_ratio(&self) -> f64 {
        (self.d0 / self.eps).ln()
    }
}

/// `E[α]`, `E[α²]`, `E[τα]` and `E[τ]` under a staleness distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMoments {
    pub e_alpha: f64,
    pub e_alpha2: f64,
    pub e_tau_alpha: f64,
    pub tau_bar: f64,
}

impl StepMoments {
    /// Moments of a constant step under mean staleness `tau_bar`.
    pub fn constant(alpha: f64, tau_bar: f64) -> Self {
        StepMoments { e_alpha: alpha, e_alpha2: alpha * alpha, e_tau_alpha: tau_bar * alpha, tau_bar }
    }

    /// Pmf-weighted sums over the truncated support of `model`.
    pub fn from_model<S: StepSize + ?Sized>(model: &StalenessModel, policy: &S) -> Result<Self> {
        let table = model.pmf_table()?;
        let mut m = StepMoments { e_alpha: 0.0, e_alpha2: 0.0, e_tau_alpha: 0.0, tau_bar: 0.0 };
        for (tau, &p) in table.iter().enumerate() {
            let a = policy.step(tau as u64);
            m.e_alpha += p * a;
            m.e_alpha2 += p * a * a;
            m.e_tau_alpha += p * tau as f64 * a;
            m.tau_bar += p * tau as f64;
        }
        if [m.e_alpha, m.e_alpha2, m.e_tau_alpha].iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric { what: "step moments", detail: format!("{m:?}") });
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundKind {
    General,
    ConstantAlpha,
    DecayingAlpha,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub kind: BoundKind,
    pub feasible: bool,
    /// Number of updates; `None` when infeasible.
    pub t: Option<f64>,
    pub t_ceil: Option<u64>,
    pub alpha: Option<f64>,
    pub denominator: f64,
    pub moments: Option<StepMoments>,
    pub diagnostics: Option<String>,
}

fn report(kind: BoundKind, input: &BoundsInput, denominator: f64, alpha: Option<f64>, moments: Option<StepMoments>) -> BoundsReport {
    if !(denominator > 0.0) || !denominator.is_finite() {
        return BoundsReport {
            kind,
            feasible: false,
            t: None,
            t_ceil: None,
            alpha,
            denominator,
            moments,
            diagnostics: Some(format!("denominator {denominator:e} is not positive: no convergence guarantee")),
        };
    }
    let lr = input.log_ratio();
    let (t, diagnostics) = if lr <= 0.0 {
        (0.0, Some("‖x₀ − x*‖² ≤ ε already".to_string()))
    } else {
        (lr / denominator, None)
    };
    BoundsReport { kind, feasible: true, t: Some(t), t_ceil: Some(t.ceil() as u64), alpha, denominator, moments, diagnostics }
}

/// `T = ln(‖x₀−x*‖²/ε) / (2(c − L M ε^{−1/2} E[τα]) E[α] − ε^{−1} M² E[α²])`.
pub fn bound_general(input: &BoundsInput, moments: &StepMoments) -> Result<BoundsReport> {
    input.validate()?;
    let BoundsInput { c, l, m, eps, .. } = *input;
    let denom = 2.0 * (c - l * m * moments.e_tau_alpha / eps.sqrt()) * moments.e_alpha - m * m * moments.e_alpha2 / eps;
    Ok(report(BoundKind::General, input, denom, None, Some(*moments)))
}

/// `α = θ c ε / (M (M + 2L√ε τ̄))` and the matching update count
/// `T = (M + 2L√ε τ̄) M / (θ(2 − θ) c² ε) · ln(‖x₀−x*‖²/ε)`.
pub fn alpha_choice_and_bound(input: &BoundsInput, theta: f64) -> Result<(f64, BoundsReport)> {
    input.validate()?;
    if !(theta > 0.0 && theta < 2.0) {
        return Err(Error::Parameter(format!("θ must lie in (0, 2), got {theta}")));
    }
    let BoundsInput { c, m, eps, tau_bar, .. } = *input;
    let k = input.delay_factor();
    let alpha = theta * c * eps / (m * k);
    let denom = theta * (2.0 - theta) * c * c * eps / (m * k);
    let moments = StepMoments::constant(alpha, tau_bar);
    Ok((alpha, report(BoundKind::ConstantAlpha, input, denom, Some(alpha), Some(moments))))
}

/// Largest relative increase `α(τ+1)/α(τ) − 1` tolerated by the monotonicity scan.
pub const MONOTONE_TOL: f64 = 1e-12;

/// Bound for a step size that does not increase with staleness:
/// `T = ln(‖x₀−x*‖²/ε) / (2c E[α] − ε^{−1} M (M + 2L√ε τ̄) E[α²])`, moments
/// and `τ̄` taken under `model`.
pub fn bound_decaying<S: StepSize + ?Sized>(model: &StalenessModel, policy: &S, input: &BoundsInput) -> Result<BoundsReport> {
    let support = model.pmf_table()?.len() as u64;
    for tau in 0..support.saturating_sub(1) {
        let (a, b) = (policy.step(tau), policy.step(tau + 1));
        if b > a * (1.0 + MONOTONE_TOL) {
            return Err(Error::Precondition(format!(
                "step size increases from α({tau}) = {a:e} to α({}) = {b:e}",
                tau + 1
            )));
        }
    }
    let moments = StepMoments::from_model(model, policy)?;
    let input = BoundsInput { tau_bar: moments.tau_bar, ..*input };
    input.validate()?;
    let denom = 2.0 * input.c * moments.e_alpha - input.m * input.delay_factor() * moments.e_alpha2 / input.eps;
    Ok(report(BoundKind::DecayingAlpha, &input, denom, None, Some(moments)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::steppolicy::StepPolicy;

    fn unit() -> BoundsInput {
        BoundsInput { c: 1.0, l: 1.0, m: 1.0, eps: 0.01, d0: 1.0, tau_bar: 4.0 }
    }

    #[test]
    fn corollary_example() {
        let (alpha, r) = alpha_choice_and_bound(&unit(), 1.0).unwrap();
        assert!((alpha - 0.01 / 1.8).abs() < 1e-15);
        assert!((alpha - 5.556e-3).abs() < 1e-6);
        let t = r.t.unwrap();
        assert!((t - 180.0 * 100f64.ln()).abs() < 1e-9);
        assert_eq!(r.t_ceil, Some(829));
    }

    #[test]
    fn zero_delay_alpha() {
        let input = BoundsInput { tau_bar: 0.0, m: 2.0, c: 0.5, ..unit() };
        let (alpha, _) = alpha_choice_and_bound(&input, 1.0).unwrap();
        assert!((alpha - 0.5 * 0.01 / 4.0).abs() < 1e-16);
    }

    #[test]
    fn general_reduces_to_corollary() {
        let (alpha, r1) = alpha_choice_and_bound(&unit(), 1.0).unwrap();
        let r2 = bound_general(&unit(), &StepMoments::constant(alpha, 4.0)).unwrap();
        let (t1, t2) = (r1.t.unwrap(), r2.t.unwrap());
        assert!((t1 - t2).abs() < 1e-9 * t1);
    }

    #[test]
    fn infeasible_is_flagged() {
        let r = bound_general(&unit(), &StepMoments::constant(0.1, 4.0)).unwrap();
        assert!(!r.feasible && r.t.is_none() && r.diagnostics.is_some());
        assert!(alpha_choice_and_bound(&unit(), 2.0).is_err());
        assert!(alpha_choice_and_bound(&unit(), 0.0).is_err());
    }

    #[test]
    fn decaying_constant_matches_general() {
        let model = StalenessModel::Poisson { lambda: 4.0 };
        let policy = StepPolicy::Constant { alpha: 0.005 };
        let r = bound_decaying(&model, &policy, &unit()).unwrap();
        let m = r.moments.unwrap();
        assert!((m.tau_bar - 4.0).abs() < 1e-9);
        assert!((m.e_alpha - 0.005).abs() < 1e-11 * 0.005);
        // With E[τα] = τ̄α both denominators equal 2cα − α²M(M + 2L√ε τ̄)/ε.
        let g = bound_general(&unit(), &StepMoments::constant(0.005, m.tau_bar)).unwrap();
        assert!((r.t.unwrap() - g.t.unwrap()).abs() < 1e-9 * g.t.unwrap());
    }

    #[test]
    fn increasing_policy_is_rejected() {
        let model = StalenessModel::Cmp { lambda: 8.0, nu: 1.0 };
        let policy = StepPolicy::CmpZero { lambda: 8.0, nu: 1.0, c: 1.0, alpha: 0.01 };
        assert!(matches!(bound_decaying(&model, &policy, &unit()), Err(Error::Precondition(_))));
    }
}
