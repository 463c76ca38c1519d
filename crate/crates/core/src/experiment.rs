//! Worker-count sweeps comparing a constant step with a staleness-adaptive one
//! under the same normalization.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::engine::{derive_seed, run, DelaySource, Mode, RunConfig};
use crate::error::{Error, Result};
use crate::problems::ProblemSpec;
use crate::specialfn::cmp_normalizer;
use crate::steppolicy::{PolicySpec, StepPolicy, WrapperSpec, DEFAULT_CLIP_MULT, DEFAULT_CUTOFF};

pub const DEFAULT_PILOT_STEPS: u64 = 5_000;

/// Adaptive policy whose distribution parameters follow the worker count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AdaptiveTemplate {
    /// `PoissonTune` with `λ = m`; `K` defaults to `α_c`.
    PoissonTune {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        k: Option<f64>,
    },
    /// `CmpTune` with `λ = m^ν` and the largest `K` keeping `c(τ) ≥ 0`,
    /// `K = α_c e^{λ}/Z(λ, ν)` (equal to `α_c` for `ν = 1`).
    CmpTune { nu: f64 },
    /// `CmpZero` with `λ = m^ν`, `C = 1`.
    CmpZero { nu: f64 },
    InverseTau,
}

impl AdaptiveTemplate {
    pub fn instantiate(&self, workers: usize, alpha: f64) -> Result<StepPolicy> {
        let m = workers as f64;
        let policy = match *self {
            AdaptiveTemplate::PoissonTune { k } => StepPolicy::PoissonTune { lambda: m, k: k.unwrap_or(alpha), alpha },
            AdaptiveTemplate::CmpTune { nu } => {
                let lambda = m.powf(nu);
                let z = cmp_normalizer(lambda, nu)?;
                let k = alpha * (lambda - z.ln_value).exp().min(1.0);
                StepPolicy::CmpTune { lambda, nu, k, alpha }
            }
            AdaptiveTemplate::CmpZero { nu } => StepPolicy::CmpZero { lambda: m.powf(nu), nu, c: 1.0, alpha },
            AdaptiveTemplate::InverseTau => StepPolicy::InverseTau { alpha },
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn name(&self) -> String {
        match self {
            AdaptiveTemplate::PoissonTune { k: None } => "poisson-tune".into(),
            AdaptiveTemplate::PoissonTune { k: Some(k) } => format!("poisson-tune:{k}"),
            AdaptiveTemplate::CmpTune { nu } => format!("cmp-tune:{nu}"),
            AdaptiveTemplate::CmpZero { nu } => format!("cmp-zero:{nu}"),
            AdaptiveTemplate::InverseTau => "inv-tau".into(),
        }
    }
}

impl fmt::Display for AdaptiveTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for AdaptiveTemplate {
    type Err = Error;

    /// `poisson-tune[:K]`, `cmp-tune:ν`, `cmp-zero:ν`, `inv-tau`.
    fn from_str(s: &str) -> Result<Self> {
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let nu = || -> Result<f64> {
            arg.ok_or_else(|| Error::Input(format!("'{s}' needs ν, e.g. {head}:1")))?
                .parse()
                .map_err(|_| Error::Input(format!("bad ν in '{s}'")))
        };
        match head {
            "poisson-tune" => Ok(AdaptiveTemplate::PoissonTune {
                k: match arg {
                    None => None,
                    Some(a) => Some(a.parse().map_err(|_| Error::Input(format!("bad K in '{s}'")))?),
                },
            }),
            "cmp-tune" => Ok(AdaptiveTemplate::CmpTune { nu: nu()? }),
            "cmp-zero" => Ok(AdaptiveTemplate::CmpZero { nu: nu()? }),
            "inv-tau" => Ok(AdaptiveTemplate::InverseTau),
            _ => Err(Error::Input(format!(
                "unknown adaptive policy '{s}' (expected poisson-tune[:K], cmp-tune:ν, cmp-zero:ν or inv-tau)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub problem: ProblemSpec,
    pub mode: Mode,
    pub delay: Option<DelaySource>,
    pub workers: Vec<usize>,
    pub repeats: u64,
    pub seed: u64,
    /// Reference constant step `α_c`.
    pub alpha: f64,
    pub adaptive: AdaptiveTemplate,
    /// Update budget per run.
    pub max_steps: u64,
    pub loss_threshold: f64,
    pub stride: u64,
    pub pilot_steps: u64,
    pub clip_mult: f64,
    pub cutoff: u64,
    /// Concurrent runs; `None` uses the available parallelism.
    pub threads: Option<usize>,
}

impl SweepConfig {
    pub fn new(problem: ProblemSpec, workers: Vec<usize>, alpha: f64, loss_threshold: f64, max_steps: u64) -> Self {
        SweepConfig {
            problem,
            mode: Mode::AsyncSimulated,
            delay: Some(DelaySource::event_driven(0.35)),
            workers,
            repeats: 5,
            seed: 0,
            alpha,
            adaptive: AdaptiveTemplate::PoissonTune { k: None },
            max_steps,
            loss_threshold,
            stride: 10,
            pilot_steps: DEFAULT_PILOT_STEPS,
            clip_mult: DEFAULT_CLIP_MULT,
            cutoff: DEFAULT_CUTOFF,
            threads: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.workers.is_empty() || self.workers.contains(&0) {
            return Err(Error::Validation("worker counts must be a non-empty list of positive integers".into()));
        }
        if self.repeats == 0 {
            return Err(Error::Validation("at least one repeat is required".into()));
        }
        if self.pilot_steps == 0 || self.max_steps == 0 {
            return Err(Error::Validation("pilot and run lengths must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Validation(format!("α_c must be positive, got {}", self.alpha)));
        }
        Ok(())
    }

    fn base(&self, workers: usize, policy: PolicySpec, steps: u64, seed: u64) -> RunConfig {
        let mut c = RunConfig::new(self.mode, self.problem.clone(), policy, steps, seed);
        c.workers = workers;
        c.delay = self.delay.clone();
        c.stride = self.stride;
        c.history = c.history.max(self.cutoff);
        c
    }

    /// Constant-step pilot whose staleness histogram normalizes both policies.
    pub fn pilot(&self, workers: usize) -> Result<RunConfig> {
        let policy = PolicySpec::plain(StepPolicy::Constant { alpha: self.alpha });
        let mut c = self.base(workers, policy, self.pilot_steps, derive_seed(self.seed, workers as u64, u64::MAX));
        c.stride = self.pilot_steps;
        Ok(c)
    }

    /// The run for one (worker count, policy, repeat) cell.
    pub fn cell(&self, workers: usize, adaptive: bool, repeat: u64, reference: &crate::distributions::StalenessHistogram) -> Result<RunConfig> {
        let inner = if adaptive {
            self.adaptive.instantiate(workers, self.alpha)?
        } else {
            StepPolicy::Constant { alpha: self.alpha }
        };
        let wrappers = WrapperSpec { normalize_to: Some(self.alpha), clip_mult: Some(self.clip_mult), cutoff: Some(self.cutoff) };
        let policy = PolicySpec { policy: inner, wrappers };
        let mut c = self.base(workers, policy, self.max_steps, derive_seed(self.seed, workers as u64, repeat));
        c.reference_histogram = Some(reference.clone());
        c.loss_threshold = Some(self.loss_threshold);
        c.stop_at_threshold = true;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub workers: usize,
    pub policy: String,
    /// `None` when fewer than half of the repeats reached the threshold.
    pub median_updates: Option<f64>,
    /// Over the repeats that reached the threshold.
    pub stddev_updates: Option<f64>,
    pub median_epochs: Option<f64>,
    pub reached: u64,
    pub repeats: u64,
    /// Updates to threshold per repeat; `None` for runs that did not get there.
    #[serde(skip)]
    pub per_repeat: Vec<Option<u64>>,
}

/// Median with unreached runs counted as infinitely slow.
pub fn median_reached(values: &[Option<u64>]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().map(|x| x.map_or(f64::INFINITY, |u| u as f64)).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let med = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    med.is_finite().then_some(med)
}

fn stddev(values: &[f64]) -> Option<f64> {
    if values.len() < 2 {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Some((values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// Runs the grid and returns two rows per worker count: constant, then adaptive.
pub fn sweep(config: &SweepConfig) -> Result<Vec<SweepRow>> {
    config.validate()?;
    let epoch = config.problem.build()?.updates_per_epoch();

    let mut references = Vec::with_capacity(config.workers.len());
    for &m in &config.workers {
        references.push(run(&config.pilot(m)?)?.histogram);
    }

    let mut jobs = Vec::new();
    for (wi, &m) in config.workers.iter().enumerate() {
        for adaptive in [false, true] {
            for r in 0..config.repeats {
                jobs.push((wi, m, adaptive, r));
            }
        }
    }
    let results: Vec<Mutex<Option<Result<Option<u64>>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let threads = config
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .clamp(1, jobs.len());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(wi, m, adaptive, r)) = jobs.get(i) else { break };
                let out = config
                    .cell(m, adaptive, r, &references[wi])
                    .and_then(|c| run(&c))
                    .map(|t| t.updates_to_threshold);
                *results[i].lock().unwrap() = Some(out);
            });
        }
    });

    let mut rows = Vec::new();
    let mut it = results.into_iter().map(|m| m.into_inner().unwrap().expect("every job ran"));
    for &m in &config.workers {
        for adaptive in [false, true] {
            let per_repeat = (0..config.repeats).map(|_| it.next().unwrap()).collect::<Result<Vec<_>>>()?;
            let reached: Vec<f64> = per_repeat.iter().flatten().map(|&u| u as f64).collect();
            let median_updates = median_reached(&per_repeat);
            rows.push(SweepRow {
                workers: m,
                policy: if adaptive { config.adaptive.name() } else { "constant".into() },
                median_updates,
                stddev_updates: stddev(&reached),
                median_epochs: median_updates.zip(epoch).map(|(u, e)| u / e as f64),
                reached: reached.len() as u64,
                repeats: config.repeats,
                per_repeat,
            });
        }
    }
    Ok(rows)
}

/// `workers,policy,median_updates,stddev_updates,median_epochs,reached,repeats`.
pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["workers", "policy", "median_updates", "stddev_updates", "median_epochs", "reached", "repeats"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        out.write_record([
            r.workers.to_string(),
            r.policy.clone(),
            opt(r.median_updates),
            opt(r.stddev_updates),
            opt(r.median_epochs),
            r.reached.to_string(),
            r.repeats.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
