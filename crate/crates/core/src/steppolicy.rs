//! Staleness-adaptive step sizes `α(τ)` and the wrappers used when comparing
//! them against a constant step (normalization, clipping, staleness cutoff).
//!
//! All formulas are evaluated in log space; a step of `0` means the update is
//! skipped.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::distributions::{StalenessHistogram, StalenessModel};
use crate::error::{Error, Result};
use crate::specialfn::{
    cmp_normalizer, ln_add_exp, ln_cmp_head_sum, ln_cmp_tail_sum, ln_poisson_upper_tail, log_factorial,
    regularized_upper_gamma,
};

/// Default clipping cap, as a multiple of the reference constant step.
pub const DEFAULT_CLIP_MULT: f64 = 5.0;
/// Default staleness cutoff: gradients older than this are dropped.
pub const DEFAULT_CUTOFF: u64 = 150;

/// Anything that maps a staleness value to a step size.
pub trait StepSize {
    /// `ln α(τ)`; `-inf` means skip.
    fn ln_step(&self, tau: u64) -> f64;

    /// `α(τ)`, saturated at `f64::MAX`.
    fn step(&self, tau: u64) -> f64 {
        self.ln_step(tau).exp().min(f64::MAX)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "kebab-case")]
pub enum StepPolicy {
    Constant { alpha: f64 },
    /// `α(τ) = C^{−τ} p^{−1} α`, with `C` chosen so that geometric staleness
    /// with parameter `p` induces momentum `mu`: `C = (1 − p)/mu`.
    GeometricTuned { p: f64, mu: f64, alpha: f64 },
    /// `α(τ) = C λ^{−τ} (τ!)^ν α`: flattens `P[τ=i]·α(i)` under `CMP(λ, ν)`.
    CmpZero { lambda: f64, nu: f64, c: f64, alpha: f64 },
    /// `α(τ) = c(τ) λ^{−τ} (τ!)^ν α` with
    /// `c(τ) = 1 − (K/α) e^{−λ} Σ_{j<τ} λ^j/(j!)^ν`.
    CmpTune { lambda: f64, nu: f64, k: f64, alpha: f64 },
    /// `α(τ) = (1 − (K/α) Q(τ, λ)) λ^{−τ} τ! α`.
    PoissonTune { lambda: f64, k: f64, alpha: f64 },
    /// `α / max(τ, 1)`.
    InverseTau { alpha: f64 },
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{name} must be positive and finite, got {v}")))
    }
}

/// `C` such that `StepPolicy::GeometricTuned` over `Geometric(p)` staleness
/// induces implicit momentum `mu`.
///
/// The expected asynchronous update has drift weights
/// `P[τ=i]·α(i) = α ((1 − p)/C)^i`, a geometric kernel, so the induced momentum
/// is `(1 − p)/C`. `mu = 0` gives `C = +inf`: only fresh gradients are applied.
pub fn derive_c_for_momentum(p: f64, mu: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Parameter(format!("p must lie in (0, 1), got {p}")));
    }
    if !(0.0..1.0).contains(&mu) {
        return Err(Error::Parameter(format!(
            "target momentum must lie in [0, 1), got {mu}; larger values make the expected step diverge"
        )));
    }
    Ok((1.0 - p) / mu)
}

/// Implicit momentum `(1 − p)/C` induced by `C^{−τ} p^{−1} α` under `Geometric(p)`.
pub fn implied_momentum(p: f64, c: f64) -> f64 {
    (1.0 - p) / c
}

impl StepPolicy {
    /// Builds a [`StepPolicy::GeometricTuned`], validating the target momentum.
    pub fn geometric_tuned(p: f64, mu: f64, alpha: f64) -> Result<Self> {
        let policy = StepPolicy::GeometricTuned { p, mu, alpha };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            StepPolicy::Constant { alpha } | StepPolicy::InverseTau { alpha } => positive("α", alpha),
            StepPolicy::GeometricTuned { p, mu, alpha } => {
                positive("α", alpha)?;
                derive_c_for_momentum(p, mu).map(|_| ())
            }
            StepPolicy::CmpZero { lambda, nu, c, alpha } => {
                positive("α", alpha)?;
                positive("λ", lambda)?;
                positive("ν", nu)?;
                positive("C", c)
            }
            StepPolicy::CmpTune { lambda, nu, k, alpha } => {
                positive("α", alpha)?;
                positive("λ", lambda)?;
                positive("ν", nu)?;
                non_negative_k(k)
            }
            StepPolicy::PoissonTune { lambda, k, alpha } => {
                positive("α", alpha)?;
                positive("λ", lambda)?;
                non_negative_k(k)
            }
        }
    }

    /// The base step `α` every variant carries.
    pub fn base_alpha(&self) -> f64 {
        match *self {
            StepPolicy::Constant { alpha }
            | StepPolicy::InverseTau { alpha }
            | StepPolicy::GeometricTuned { alpha, .. }
            | StepPolicy::CmpZero { alpha, .. }
            | StepPolicy::CmpTune { alpha, .. }
            | StepPolicy::PoissonTune { alpha, .. } => alpha,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            StepPolicy::Constant { .. } => "constant",
            StepPolicy::GeometricTuned { .. } => "geometric-tuned",
            StepPolicy::CmpZero { .. } => "cmp-zero",
            StepPolicy::CmpTune { .. } => "cmp-tune",
            StepPolicy::PoissonTune { .. } => "poisson-tune",
            StepPolicy::InverseTau { .. } => "inverse-tau",
        }
    }

    /// The adaptive factor `c(τ)` of the tune policies, before clamping; `None`
    /// for the other variants.
    pub fn tune_factor(&self, tau: u64) -> Option<f64> {
        match *self {
            StepPolicy::CmpTune { lambda, nu, k, alpha } => {
                let a_ln = (k / alpha).ln() - lambda;
                Some(1.0 - (a_ln + ln_cmp_head_sum(lambda, nu, tau)).exp())
            }
            StepPolicy::PoissonTune { lambda, k, alpha } => {
                Some(1.0 - k / alpha * regularized_upper_gamma(tau, lambda))
            }
            _ => None,
        }
    }

    /// Parses `const:α`, `inv-tau:α`, `geom-tuned:p,μ,α`, `cmp-zero:λ,ν,C,α`,
    /// `cmp-tune:λ,ν,K,α` and `poisson-tune:λ,K,α`.
    ///
    /// With a `model`, the distribution parameters may be left out
    /// (`cmp-zero:C,α` over `cmp:λ,ν`, `geom-tuned:μ,α` over `geom:p`, ...).
    pub fn parse(s: &str, model: Option<&StalenessModel>) -> Result<Self> {
        let (head, args) = s
            .split_once(':')
            .ok_or_else(|| Error::Input(format!("policy '{s}' is not of the form kind:params")))?;
        let v: Vec<f64> = args
            .split(',')
            .map(|a| a.trim().parse::<f64>().map_err(|_| Error::Input(format!("bad number '{a}' in policy '{s}'"))))
            .collect::<Result<_>>()?;
        let arity = |n: usize| Error::Input(format!("policy '{s}' expects {n} parameters"));
        let cmp_params = || match model {
            Some(StalenessModel::Cmp { lambda, nu }) => Ok((*lambda, *nu)),
            Some(StalenessModel::Poisson { lambda }) => Ok((*lambda, 1.0)),
            _ => Err(Error::Input(format!("policy '{s}' needs λ,ν or a cmp/poisson model"))),
        };
        let policy = match head {
            "const" | "constant" => match v[..] {
                [alpha] => StepPolicy::Constant { alpha },
                _ => return Err(arity(1)),
            },
            "inv-tau" | "inverse-tau" => match v[..] {
                [alpha] => StepPolicy::InverseTau { alpha },
                _ => return Err(arity(1)),
            },
            "geom-tuned" | "geometric-tuned" => match (&v[..], model) {
                (&[p, mu, alpha], _) => StepPolicy::GeometricTuned { p, mu, alpha },
                (&[mu, alpha], Some(StalenessModel::Geometric { p })) => StepPolicy::GeometricTuned { p: *p, mu, alpha },
                _ => return Err(arity(3)),
            },
            "cmp-zero" => match v[..] {
                [lambda, nu, c, alpha] => StepPolicy::CmpZero { lambda, nu, c, alpha },
                [c, alpha] => {
                    let (lambda, nu) = cmp_params()?;
                    StepPolicy::CmpZero { lambda, nu, c, alpha }
                }
                _ => return Err(arity(4)),
            },
            "cmp-tune" => match v[..] {
                [lambda, nu, k, alpha] => StepPolicy::CmpTune { lambda, nu, k, alpha },
                [k, alpha] => {
                    let (lambda, nu) = cmp_params()?;
                    StepPolicy::CmpTune { lambda, nu, k, alpha }
                }
                _ => return Err(arity(4)),
            },
            "poisson-tune" => match v[..] {
                [lambda, k, alpha] => StepPolicy::PoissonTune { lambda, k, alpha },
                [k, alpha] => StepPolicy::PoissonTune { lambda: cmp_params()?.0, k, alpha },
                _ => return Err(arity(3)),
            },
            other => return Err(Error::Input(format!("unknown policy kind '{other}'"))),
        };
        policy.validate()?;
        Ok(policy)
    }
}

fn non_negative_k(k: f64) -> Result<()> {
    if k >= 0.0 && k.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("momentum magnitude K must be non-negative, got {k}")))
    }
}

/// `ln c` for `c = 1 − a·S` where `S = head` and `S + tail = total`, falling
/// back to `c = (1 − a·total) + a·tail` when `a·S` is close to one.
fn ln_tune_factor(ln_a: f64, ln_head: f64, ln_tail: impl FnOnce() -> f64, ln_total: f64) -> f64 {
    let x = (ln_a + ln_head).exp();
    if x < 0.5 {
        return (-x).ln_1p();
    }
    let base = 1.0 - (ln_a + ln_total).exp();
    let ln_rest = ln_a + ln_tail();
    if base > 0.0 {
        ln_add_exp(base.ln(), ln_rest)
    } else if base == 0.0 {
        ln_rest
    } else {
        let c = base + ln_rest.exp();
        if c > 0.0 {
            c.ln()
        } else {
            f64::NEG_INFINITY
        }
    }
}

impl StepSize for StepPolicy {
    fn ln_step(&self, tau: u64) -> f64 {
        let t = tau as f64;
        match *self {
            StepPolicy::Constant { alpha } => alpha.ln(),
            StepPolicy::InverseTau { alpha } => alpha.ln() - t.max(1.0).ln(),
            StepPolicy::GeometricTuned { p, mu, alpha } => {
                let base = alpha.ln() - p.ln();
                if tau == 0 {
                    base
                } else {
                    // −τ ln C = τ (ln μ − ln(1 − p))
                    base + t * (mu.ln() - (-p).ln_1p())
                }
            }
            StepPolicy::CmpZero { lambda, nu, c, alpha } => {
                c.ln() + alpha.ln() - t * lambda.ln() + nu * log_factorial(tau)
            }
            StepPolicy::CmpTune { lambda, nu, k, alpha } => {
                let shape = alpha.ln() - t * lambda.ln() + nu * log_factorial(tau);
                if k == 0.0 || tau == 0 {
                    return shape;
                }
                let ln_a = (k / alpha).ln() - lambda;
                let ln_head = ln_cmp_head_sum(lambda, nu, tau);
                let ln_c = if (ln_a + ln_head).exp() < 0.5 {
                    ln_tune_factor(ln_a, ln_head, || f64::NEG_INFINITY, f64::NEG_INFINITY)
                } else {
                    let ln_z = if nu == 1.0 { Ok(lambda) } else { cmp_normalizer(lambda, nu).map(|z| z.ln_value) };
                    match ln_z {
                        Ok(mut ln_z) => {
                            // K at its maximum α e^λ/Z leaves 1 − (K/α)e^{−λ}Z at
                            // rounding level; that noise would swamp the tail.
                            let tol = 16.0 * f64::EPSILON * ln_z.abs().max(lambda).max(1.0);
                            if (ln_a + ln_z).abs() <= tol {
                                ln_z = -ln_a;
                            }
                            ln_tune_factor(ln_a, ln_head, || ln_cmp_tail_sum(lambda, nu, tau), ln_z)
                        }
                        Err(_) => f64::NEG_INFINITY,
                    }
                };
                ln_c + shape
            }
            StepPolicy::PoissonTune { lambda, k, alpha } => {
                let shape = alpha.ln() - t * lambda.ln() + log_factorial(tau);
                if k == 0.0 || tau == 0 {
                    return shape;
                }
                // Q = e^{−λ} Σ_{j<τ} λ^j/j!, total mass e^{−λ}·e^{λ} = 1.
                let ln_a = (k / alpha).ln();
                let ln_q = regularized_upper_gamma(tau, lambda).ln();
                ln_tune_factor(ln_a, ln_q, || ln_poisson_upper_tail(tau, lambda), 0.0) + shape
            }
        }
    }

    fn step(&self, tau: u64) -> f64 {
        match *self {
            StepPolicy::Constant { alpha } => alpha,
            StepPolicy::InverseTau { alpha } => alpha / tau.max(1) as f64,
            _ => self.ln_step(tau).exp().min(f64::MAX),
        }
    }
}

impl fmt::Display for StepPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            StepPolicy::Constant { alpha } => write!(f, "const:{alpha}"),
            StepPolicy::InverseTau { alpha } => write!(f, "inv-tau:{alpha}"),
            StepPolicy::GeometricTuned { p, mu, alpha } => write!(f, "geom-tuned:{p},{mu},{alpha}"),
            StepPolicy::CmpZero { lambda, nu, c, alpha } => write!(f, "cmp-zero:{lambda},{nu},{c},{alpha}"),
            StepPolicy::CmpTune { lambda, nu, k, alpha } => write!(f, "cmp-tune:{lambda},{nu},{k},{alpha}"),
            StepPolicy::PoissonTune { lambda, k, alpha } => write!(f, "poisson-tune:{lambda},{k},{alpha}"),
        }
    }
}

/// `α_c / Σ_τ freq(τ)·α(τ)`, computed in log space.
pub fn normalization_factor<S: StepSize + ?Sized>(
    policy: &S,
    hist: &StalenessHistogram,
    target_alpha: f64,
) -> Result<f64> {
    positive("normalization target α_c", target_alpha)?;
    let ln_mean = hist
        .frequencies()
        .map(|(tau, q)| q.ln() + policy.ln_step(tau))
        .fold(f64::NEG_INFINITY, ln_add_exp);
    if ln_mean == f64::NEG_INFINITY {
        return Err(Error::Normalization(
            "every staleness value in the reference histogram is skipped by the policy".into(),
        ));
    }
    if !ln_mean.is_finite() {
        return Err(Error::Normalization(format!("weighted mean step is not finite (ln = {ln_mean})")));
    }
    Ok((target_alpha.ln() - ln_mean).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// Multiplier applied to the raw policy.
    pub scale: f64,
    /// The reference constant step `α_c` the weighted mean was matched to.
    pub target_alpha: f64,
    /// Histogram the expectation was taken over.
    pub reference: StalenessHistogram,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Clip {
    /// Cap as a multiple of `base_alpha`.
    pub mult: f64,
    pub base_alpha: f64,
}

/// A policy with optional normalization, clipping and staleness cutoff, applied
/// in that order: `α(τ) = min(s·inner(τ), mult·α_c)` for `τ ≤ cutoff`, skip otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyWrapper {
    pub inner: StepPolicy,
    pub normalization: Option<Normalization>,
    pub clip: Option<Clip>,
    pub cutoff: Option<u64>,
}

impl From<StepPolicy> for PolicyWrapper {
    fn from(inner: StepPolicy) -> Self {
        PolicyWrapper { inner, normalization: None, clip: None, cutoff: None }
    }
}

impl PolicyWrapper {
    pub fn scale(&self) -> f64 {
        self.normalization.as_ref().map_or(1.0, |n| n.scale)
    }

    /// The reference constant step: the normalization target if there is one,
    /// the inner policy's base step otherwise.
    pub fn reference_alpha(&self) -> f64 {
        self.normalization.as_ref().map_or(self.inner.base_alpha(), |n| n.target_alpha)
    }

    /// Rescales so that the (unclipped) weighted mean step over `hist` equals
    /// `target_alpha`. Normalizing twice against the same histogram is a no-op.
    pub fn normalized(mut self, hist: &StalenessHistogram, target_alpha: f64) -> Result<Self> {
        let current = self.scale();
        let extra = normalization_factor(&Scaled { inner: &self.inner, ln_scale: current.ln() }, hist, target_alpha)?;
        self.normalization = Some(Normalization { scale: current * extra, target_alpha, reference: hist.clone() });
        Ok(self)
    }

    /// Caps the step at `mult` times the reference step and drops gradients
    /// with staleness above `cutoff`.
    pub fn clipped(mut self, mult: f64, cutoff: u64) -> Result<Self> {
        positive("clip multiple", mult)?;
        self.clip = Some(Clip { mult, base_alpha: self.reference_alpha() });
        self.cutoff = Some(cutoff);
        Ok(self)
    }

    pub fn with_cutoff(mut self, cutoff: Option<u64>) -> Self {
        self.cutoff = cutoff;
        self
    }

    pub fn is_skipped(&self, tau: u64) -> bool {
        self.step(tau) == 0.0
    }
}

struct Scaled<'a> {
    inner: &'a StepPolicy,
    ln_scale: f64,
}

impl StepSize for Scaled<'_> {
    fn ln_step(&self, tau: u64) -> f64 {
        self.inner.ln_step(tau) + self.ln_scale
    }
}

impl StepSize for PolicyWrapper {
    fn ln_step(&self, tau: u64) -> f64 {
        if self.cutoff.is_some_and(|c| tau > c) {
            return f64::NEG_INFINITY;
        }
        let ln = self.inner.ln_step(tau) + self.scale().ln();
        match self.clip {
            Some(clip) => ln.min((clip.mult * clip.base_alpha).ln()),
            None => ln,
        }
    }

    fn step(&self, tau: u64) -> f64 {
        if self.cutoff.is_some_and(|c| tau > c) {
            return 0.0;
        }
        let scale = self.scale();
        let v = if scale == 1.0 {
            self.inner.step(tau)
        } else {
            (self.inner.ln_step(tau) + scale.ln()).exp().min(f64::MAX)
        };
        match self.clip {
            Some(clip) => v.min(clip.mult * clip.base_alpha),
            None => v,
        }
    }
}

/// Normalize (when `normalize_to` is set), then clip, then cut off.
pub fn normalize(policy: StepPolicy, hist: &StalenessHistogram, target_alpha: f64) -> Result<PolicyWrapper> {
    policy.validate()?;
    PolicyWrapper::from(policy).normalized(hist, target_alpha)
}

/// Adds clipping at `mult·α_c` and a staleness cutoff.
pub fn clip_and_cutoff(policy: impl Into<PolicyWrapper>, mult: f64, cutoff: u64) -> Result<PolicyWrapper> {
    policy.into().clipped(mult, cutoff)
}

/// Wrapper settings in the JSON policy file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WrapperSpec {
    pub normalize_to: Option<f64>,
    pub clip_mult: Option<f64>,
    pub cutoff: Option<u64>,
}

/// `{"kind": ..., "params": {...}, "wrappers": {...}}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicySpec {
    #[serde(flatten)]
    pub policy: StepPolicy,
    #[serde(default)]
    pub wrappers: WrapperSpec,
}

impl PolicySpec {
    pub fn plain(policy: StepPolicy) -> Self {
        PolicySpec { policy, wrappers: WrapperSpec::default() }
    }

    pub fn needs_reference_histogram(&self) -> bool {
        self.wrappers.normalize_to.is_some()
    }

    pub fn build(&self, reference: Option<&StalenessHistogram>) -> Result<PolicyWrapper> {
        self.policy.validate()?;
        let mut w = PolicyWrapper::from(self.policy);
        if let Some(target) = self.wrappers.normalize_to {
            let hist = reference.ok_or_else(|| {
                Error::Input("normalize_to is set but no reference staleness histogram was supplied".into())
            })?;
            w = w.normalized(hist, target)?;
        }
        if let Some(mult) = self.wrappers.clip_mult {
            positive("clip multiple", mult)?;
            w.clip = Some(Clip { mult, base_alpha: w.reference_alpha() });
        }
        Ok(w.with_cutoff(self.wrappers.cutoff))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn cmp_tune_keeps_the_far_tail() {
        // 1 − e^{−λ}·head cancels to rounding noise long before τ = 150.
        for lambda in [1.0, 4.0, 16.0] {
            let pt = StepPolicy::PoissonTune { lambda, k: 0.01, alpha: 0.01 };
            let ct = StepPolicy::CmpTune { lambda, nu: 1.0, k: 0.01, alpha: 0.01 };
            for tau in 0..=150 {
                assert_relative_eq!(ct.step(tau), pt.step(tau), max_relative = 1e-10);
            }
        }
    }

    #[test]
    fn cmp_zero_examples() {
        let p = StepPolicy::CmpZero { lambda: 8.0, nu: 1.0, c: 1.0, alpha: 0.01 };
        assert_relative_eq!(p.step(0), 0.01, max_relative = 1e-15);
        assert_relative_eq!(p.step(2), 0.01 / 64.0 * 2.0, max_relative = 1e-14);
        assert_relative_eq!(p.step(2), 3.125e-4, max_relative = 1e-14);
    }

    #[test]
    fn poisson_tune_example() {
        let p = StepPolicy::PoissonTune { lambda: 1.0, k: 0.01, alpha: 0.01 };
        let c2 = 1.0 - 2.0 * (-1f64).exp();
        assert_relative_eq!(p.tune_factor(2).unwrap(), c2, max_relative = 1e-14);
        assert_relative_eq!(p.step(2), c2 * 2.0 * 0.01, max_relative = 1e-13);
        assert_relative_eq!(p.step(2), 5.2848e-3, epsilon = 1e-7);
    }

    #[test]
    fn inverse_tau_and_constant() {
        let p = StepPolicy::InverseTau { alpha: 0.1 };
        assert_relative_eq!(p.step(0), 0.1);
        assert_relative_eq!(p.step(1), 0.1);
        assert_relative_eq!(p.step(4), 0.025);
        assert_eq!(StepPolicy::Constant { alpha: 0.3 }.step(99), 0.3);
    }

    #[test]
    fn negative_tune_factor_is_a_skip() {
        // K/α = 100: c(τ) crosses zero once Q(τ, 16) > 1/100.
        let p = StepPolicy::PoissonTune { lambda: 16.0, k: 1.0, alpha: 0.01 };
        assert!(p.step(1) > 0.0);
        assert_eq!(p.step(20), 0.0);
        assert!(p.tune_factor(20).unwrap() < 0.0);
    }

    #[test]
    fn steps_stay_finite_far_out() {
        let policies = [
            StepPolicy::PoissonTune { lambda: 8.0, k: 0.01, alpha: 0.01 },
            StepPolicy::CmpTune { lambda: 4.0, nu: 2.0, k: 0.01, alpha: 0.01 },
            StepPolicy::CmpZero { lambda: 8.0, nu: 1.0, c: 1.0, alpha: 0.01 },
            StepPolicy::GeometricTuned { p: 0.3, mu: 0.5, alpha: 0.01 },
        ];
        for p in policies {
            for tau in [0u64, 1, 50, 150, 171, 1_000, 10_000] {
                let s = p.step(tau);
                assert!(s.is_finite() && s >= 0.0, "{p} at τ={tau}: {s}");
            }
        }
        // With K = α the Poisson factor is the upper tail, which exactly offsets τ!/λ^τ growth.
        let s = StepPolicy::PoissonTune { lambda: 8.0, k: 0.01, alpha: 0.01 }.step(10_000);
        assert!(s > 0.0 && s < 0.01);
    }

    #[test]
    fn derive_c_examples() {
        // μ* = 0: only fresh gradients survive.
        assert_eq!(derive_c_for_momentum(0.4, 0.0).unwrap(), f64::INFINITY);
        assert_relative_eq!(derive_c_for_momentum(0.2, 0.5).unwrap(), 1.6);
        assert!(derive_c_for_momentum(0.999_999, 0.5).unwrap() < 1e-5);
        for &(p, mu) in &[(0.2, 0.5), (0.7, 0.1), (0.05, 0.95)] {
            let c = derive_c_for_momentum(p, mu).unwrap();
            assert_relative_eq!(implied_momentum(p, c), mu, max_relative = 1e-15);
        }
        assert!(derive_c_for_momentum(0.5, 1.0).is_err());
        assert!(derive_c_for_momentum(0.5, -0.1).is_err());
        assert!(derive_c_for_momentum(1.0, 0.5).is_err());
    }

    #[test]
    fn geometric_tuned_with_zero_momentum_skips_stale() {
        let p = StepPolicy::geometric_tuned(0.5, 0.0, 0.01).unwrap();
        assert_relative_eq!(p.step(0), 0.02);
        assert_eq!(p.step(1), 0.0);
        let q = StepPolicy::geometric_tuned(0.5, 0.5, 0.01).unwrap();
        // C = 1: constant α/p.
        assert_relative_eq!(q.step(7), 0.02, max_relative = 1e-14);
    }

    #[test]
    fn normalization_examples() {
        let hist = StalenessHistogram::from_counts([(0, 50), (1, 30), (2, 20)]).unwrap();
        // raw steps 0.01, 0.02, 0.04
        struct Doubling;
        impl StepSize for Doubling {
            fn ln_step(&self, tau: u64) -> f64 {
                (0.01f64).ln() + tau as f64 * 2f64.ln()
            }
        }
        let s = normalization_factor(&Doubling, &hist, 0.01).unwrap();
        assert_relative_eq!(s, 0.01 / 0.019, max_relative = 1e-13);
        assert_relative_eq!(s, 0.526_32, epsilon = 1e-5);

        let w = normalize(StepPolicy::Constant { alpha: 0.01 }, &hist, 0.01).unwrap();
        assert_relative_eq!(w.scale(), 1.0, max_relative = 1e-14);

        let single = StalenessHistogram::from_counts([(0, 1)]).unwrap();
        let w = normalize(StepPolicy::Constant { alpha: 0.05 }, &single, 0.01).unwrap();
        assert_relative_eq!(w.scale(), 0.2, max_relative = 1e-14);
    }

    #[test]
    fn normalization_of_all_skipped_fails() {
        let hist = StalenessHistogram::from_counts([(3, 10)]).unwrap();
        let p = StepPolicy::geometric_tuned(0.5, 0.0, 0.01).unwrap();
        assert!(matches!(normalize(p, &hist, 0.01), Err(Error::Normalization(_))));
    }

    #[test]
    fn normalized_weighted_mean_hits_target() {
        let hist = StalenessHistogram::from_counts([(0, 3), (4, 10), (9, 20), (15, 7)]).unwrap();
        let w = normalize(StepPolicy::PoissonTune { lambda: 8.0, k: 0.01, alpha: 0.01 }, &hist, 0.01).unwrap();
        let mean: f64 = hist.frequencies().map(|(t, q)| q * w.step(t)).sum();
        assert_relative_eq!(mean, 0.01, max_relative = 1e-9);
        let again = w.clone().normalized(&hist, 0.01).unwrap();
        assert!((again.scale() / w.scale() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clip_and_cutoff_examples() {
        let w = clip_and_cutoff(StepPolicy::Constant { alpha: 0.08 }, 5.0, 150).unwrap();
        // Without normalization the reference step is the policy's own α.
        assert_relative_eq!(w.step(3), 0.08);

        let hist = StalenessHistogram::from_counts([(0, 1)]).unwrap();
        let w = normalize(StepPolicy::Constant { alpha: 0.08 }, &hist, 0.08).unwrap();
        let mut w = w;
        w.normalization.as_mut().unwrap().target_alpha = 0.01;
        let w = w.clipped(5.0, 150).unwrap();
        assert_relative_eq!(w.step(0), 0.05, max_relative = 1e-14);
        assert_eq!(w.step(151), 0.0);
        assert!(w.is_skipped(151));
        assert!(!w.is_skipped(150));

        let w = clip_and_cutoff(
            PolicyWrapper {
                inner: StepPolicy::Constant { alpha: 0.03 },
                normalization: Some(Normalization { scale: 1.0, target_alpha: 0.01, reference: hist }),
                clip: None,
                cutoff: None,
            },
            5.0,
            150,
        )
        .unwrap();
        assert_relative_eq!(w.step(10), 0.03);
    }

    #[test]
    fn policy_strings_parse() {
        let m = StalenessModel::Cmp { lambda: 8.0, nu: 1.0 };
        assert_eq!(
            StepPolicy::parse("cmp-zero:1,0.01", Some(&m)).unwrap(),
            StepPolicy::CmpZero { lambda: 8.0, nu: 1.0, c: 1.0, alpha: 0.01 }
        );
        assert_eq!(
            StepPolicy::parse("poisson-tune:16,0.01,0.01", None).unwrap(),
            StepPolicy::PoissonTune { lambda: 16.0, k: 0.01, alpha: 0.01 }
        );
        assert_eq!(
            StepPolicy::parse("geom-tuned:0.5,0.01", Some(&StalenessModel::Geometric { p: 0.3 })).unwrap(),
            StepPolicy::GeometricTuned { p: 0.3, mu: 0.5, alpha: 0.01 }
        );
        assert!(StepPolicy::parse("cmp-zero:1,0.01", None).is_err());
        assert!(StepPolicy::parse("const:-1", None).is_err());
        assert!(StepPolicy::parse("nope:1", None).is_err());
        for p in ["const:0.1", "inv-tau:0.2", "cmp-tune:4,2,0.01,0.01", "geom-tuned:0.3,0.5,0.01"] {
            let parsed = StepPolicy::parse(p, None).unwrap();
            assert_eq!(StepPolicy::parse(&parsed.to_string(), None).unwrap(), parsed);
        }
    }

    #[test]
    fn policy_spec_json() {
        let json = r#"{"kind":"poisson-tune","params":{"lambda":16,"k":0.01,"alpha":0.01},
                       "wrappers":{"normalize_to":0.01,"clip_mult":5,"cutoff":150}}"#;
        let spec: PolicySpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.policy, StepPolicy::PoissonTune { lambda: 16.0, k: 0.01, alpha: 0.01 });
        assert_eq!(spec.wrappers.cutoff, Some(150));
        assert!(spec.build(None).is_err());
        let hist = StalenessHistogram::from_counts([(10, 4), (15, 9), (20, 3)]).unwrap();
        let w = spec.build(Some(&hist)).unwrap();
        assert!(w.step(12) <= 0.05 + 1e-15);
        assert_eq!(w.step(151), 0.0);

        let back: PolicySpec = serde_json::from_value(serde_json::to_value(spec).unwrap()).unwrap();
        assert_eq!(back, spec);

        let plain: PolicySpec = serde_json::from_str(r#"{"kind":"constant","params":{"alpha":0.1}}"#).unwrap();
        assert_eq!(plain.wrappers, WrapperSpec::default());
    }
}
