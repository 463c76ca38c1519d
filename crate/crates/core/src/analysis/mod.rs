//! Drift coefficients of the expected asynchronous update, implicit-momentum
//! estimation from trajectories, and convergence-bound calculators.

mod bounds;
mod drift;
mod momentum;

pub use bounds::{
    alpha_choice_and_bound, bound_decaying, bound_general, BoundKind, BoundsInput, BoundsReport, StepMoments,
    MONOTONE_TOL,
};
pub use drift::{drift_report, DriftCheck, DriftClaim, DriftReport};
pub use momentum::{
    estimate_implicit_momentum, fit_drift_kernel, kernel_ratio, MomentumEstimate, MomentumParams,
    MIN_USABLE_INCREMENTS,
};
