//! SGD execution: sequential, synchronous, simulated asynchronous and threaded
//! asynchronous (parameter server) modes.

mod report;
mod sequential;
mod simulated;
mod threaded;

pub use report::{read_iterates_csv, write_iterates_csv, RunSummary};
pub use sequential::{run_sequential, run_sync};
pub use simulated::run_async_simulated;
pub use threaded::{run_async_threaded, run_threaded_with};

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{StalenessHistogram, StalenessModel};
use crate::error::{Error, Result};
use crate::problems::{Problem, ProblemSpec};
use crate::steppolicy::{PolicySpec, PolicyWrapper};

pub const DEFAULT_HISTORY: u64 = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Sequential,
    Sync,
    AsyncThreaded,
    AsyncSimulated,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Sequential => "sequential",
            Mode::Sync => "sync",
            Mode::AsyncThreaded => "async-threaded",
            Mode::AsyncSimulated => "async-simulated",
        }
    }

    /// Same config and seed give the same trace.
    pub fn is_deterministic(self) -> bool {
        self != Mode::AsyncThreaded
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq" | "sequential" => Ok(Mode::Sequential),
            "sync" => Ok(Mode::Sync),
            "async-threaded" | "threaded" => Ok(Mode::AsyncThreaded),
            "async-simulated" | "async-sim" | "sim" => Ok(Mode::AsyncSimulated),
            other => Err(Error::Input(format!(
                "unknown mode '{other}' (expected seq, sync, async-threaded or async-sim)"
            ))),
        }
    }
}

/// Per-worker compute-time distribution of the event-driven simulation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "kebab-case")]
pub enum ComputeTime {
    Exponential { mean: f64 },
    Gamma { shape: f64, mean: f64 },
}

impl ComputeTime {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ComputeTime::Exponential { mean } => mean > 0.0 && mean.is_finite(),
            ComputeTime::Gamma { shape, mean } => shape > 0.0 && mean > 0.0 && shape.is_finite() && mean.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("compute-time parameters must be positive: {self:?}")))
        }
    }
}

/// Where staleness comes from in simulated mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DelaySource {
    /// Every update has the same staleness.
    Fixed { tau: u64 },
    /// One draw from the model per update.
    Model { model: StalenessModel },
    /// `workers` virtual workers with random compute times and a server that
    /// spends `apply_time` per update; staleness follows from the event order.
    EventDriven { compute: ComputeTime, apply_time: f64 },
}

impl DelaySource {
    /// Exponential compute times with mean 1 and the given apply time.
    pub fn event_driven(apply_time: f64) -> Self {
        DelaySource::EventDriven { compute: ComputeTime::Exponential { mean: 1.0 }, apply_time }
    }
}

fn one() -> usize {
    1
}

fn one_u64() -> u64 {
    1
}

fn default_history() -> u64 {
    DEFAULT_HISTORY
}

/// Everything a run depends on. Serialized verbatim into the run summary so a
/// run can be replayed from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub problem: ProblemSpec,
    pub policy: PolicySpec,
    #[serde(default = "one")]
    pub workers: usize,
    pub steps: u64,
    pub seed: u64,
    /// Loss and distance are evaluated every `stride` updates and at the end.
    #[serde(default = "one_u64")]
    pub stride: u64,
    #[serde(default)]
    pub delay: Option<DelaySource>,
    /// Snapshot history cap for model-sampled delays.
    #[serde(default = "default_history")]
    pub history: u64,
    /// Staleness histogram the policy is normalized against.
    #[serde(default)]
    pub reference_histogram: Option<StalenessHistogram>,
    #[serde(default)]
    pub loss_threshold: Option<f64>,
    #[serde(default)]
    pub stop_at_threshold: bool,
    /// Keep every iterate in the trace (needed for momentum estimation).
    #[serde(default)]
    pub record_iterates: bool,
}

impl RunConfig {
    pub fn new(mode: Mode, problem: ProblemSpec, policy: PolicySpec, steps: u64, seed: u64) -> Self {
        RunConfig {
            mode,
            problem,
            policy,
            workers: 1,
            steps,
            seed,
            stride: 1,
            delay: None,
            history: DEFAULT_HISTORY,
            reference_histogram: None,
            loss_threshold: None,
            stop_at_threshold: false,
            record_iterates: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Validation("the number of updates must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Validation("at least one worker is required".into()));
        }
        if self.stride == 0 {
            return Err(Error::Validation("trace stride must be at least 1".into()));
        }
        if let Some(cutoff) = self.policy.wrappers.cutoff {
            if self.history < cutoff {
                return Err(Error::Validation(format!(
                    "history cap {} is below the staleness cutoff {cutoff}",
                    self.history
                )));
            }
        }
        if let Some(th) = self.loss_threshold {
            if th.is_nan() {
                return Err(Error::Validation("loss threshold is NaN".into()));
            }
        }
        match (self.mode, &self.delay) {
            (Mode::AsyncSimulated, None) => {
                return Err(Error::Validation("simulated asynchronous mode needs a delay source".into()))
            }
            (Mode::AsyncSimulated, Some(DelaySource::Model { model })) => model.validate()?,
            (Mode::AsyncSimulated, Some(DelaySource::EventDriven { compute, apply_time })) => {
                compute.validate()?;
                if !(*apply_time >= 0.0 && apply_time.is_finite()) {
                    return Err(Error::Validation(format!("apply time must be non-negative, got {apply_time}")));
                }
            }
            _ => {}
        }
        if self.policy.needs_reference_histogram() && self.reference_histogram.is_none() {
            return Err(Error::Validation("policy normalization needs a reference staleness histogram".into()));
        }
        Ok(())
    }

    /// Validates, builds the problem and the wrapped policy.
    pub fn prepare(&self) -> Result<(Problem, PolicyWrapper)> {
        self.validate()?;
        let problem = self.problem.build()?;
        let policy = self.policy.build(self.reference_histogram.as_ref())?;
        Ok((problem, policy))
    }
}

/// One applied or skipped update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub step: u64,
    pub tau: u64,
    /// Step size applied; `0` means the update was skipped.
    pub alpha: f64,
    /// Loss after the update, at stride points.
    pub loss: Option<f64>,
    pub dist2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub mode: Mode,
    pub records: Vec<UpdateRecord>,
    pub final_x: Vec<f64>,
    pub histogram: StalenessHistogram,
    pub skipped: u64,
    /// Staleness draws that exceeded the snapshot history and were clamped.
    pub clamped: u64,
    /// `m·b` for sync runs, `b` for other mini-batch runs.
    pub effective_batch: Option<usize>,
    /// Number of updates until the stride-sampled loss first reached the threshold.
    pub updates_to_threshold: Option<u64>,
    pub stopped_early: bool,
    pub wall_time_s: f64,
    /// `x_0, x_1, ...` when requested.
    pub iterates: Option<Vec<Vec<f64>>>,
}

impl RunTrace {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.loss)
    }

    pub fn final_dist2(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.dist2)
    }

    pub fn applied(&self) -> u64 {
        self.records.len() as u64 - self.skipped
    }
}

/// Builds a trace incrementally; shared by all modes.
pub(crate) struct Recorder<'a> {
    problem: &'a Problem,
    mode: Mode,
    stride: u64,
    steps: u64,
    threshold: Option<f64>,
    stop_at_threshold: bool,
    records: Vec<UpdateRecord>,
    skipped: u64,
    clamped: u64,
    reached: Option<u64>,
    iterates: Option<Vec<Vec<f64>>>,
    started: Instant,
}

impl<'a> Recorder<'a> {
    pub(crate) fn new(config: &RunConfig, problem: &'a Problem, x0: &[f64]) -> Self {
        Recorder {
            problem,
            mode: config.mode,
            stride: config.stride,
            steps: config.steps,
            threshold: config.loss_threshold,
            stop_at_threshold: config.stop_at_threshold,
            records: Vec::with_capacity(config.steps.min(1 << 24) as usize),
            skipped: 0,
            clamped: 0,
            reached: None,
            iterates: config.record_iterates.then(|| vec![x0.to_vec()]),
            started: Instant::now(),
        }
    }

    /// Records update `step`; `x` is the iterate after it. Returns true when
    /// the run should stop early.
    pub(crate) fn record(&mut self, step: u64, tau: u64, alpha: f64, x: &[f64]) -> bool {
        if alpha == 0.0 {
            self.skipped += 1;
        }
        let sampled = (step + 1) % self.stride == 0 || step + 1 == self.steps;
        let (loss, dist2) = if sampled {
            (self.problem.loss(x).ok(), self.problem.dist2(x))
        } else {
            (None, None)
        };
        self.records.push(UpdateRecord { step, tau, alpha, loss, dist2 });
        if let Some(it) = self.iterates.as_mut() {
            it.push(x.to_vec());
        }
        if let (Some(th), Some(l), None) = (self.threshold, loss, self.reached) {
            if l <= th {
                self.reached = Some(step + 1);
                return self.stop_at_threshold;
            }
        }
        false
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub(crate) fn clamp_event(&mut self) {
        self.clamped += 1;
    }

    pub(crate) fn finish(self, final_x: Vec<f64>, effective_batch: Option<usize>) -> RunTrace {
        let histogram = StalenessHistogram::from_samples(self.records.iter().map(|r| r.tau))
            .expect("a run records at least one update");
        RunTrace {
            mode: self.mode,
            stopped_early: (self.records.len() as u64) < self.steps,
            records: self.records,
            final_x,
            histogram,
            skipped: self.skipped,
            clamped: self.clamped,
            effective_batch,
            updates_to_threshold: self.reached,
            wall_time_s: self.started.elapsed().as_secs_f64(),
            iterates: self.iterates,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed for the gradient draw of `worker`'s `iter`-th read.
pub fn derive_seed(master: u64, worker: u64, iter: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ worker) ^ iter)
}

pub fn update_rng(master: u64, worker: u64, iter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, worker, iter))
}

/// Stream ids outside the worker range, for delay and event randomness.
pub(crate) const DELAY_STREAM: u64 = u64::MAX;
pub(crate) const EVENT_STREAM: u64 = u64::MAX - 1;

/// Dispatches on `config.mode`.
pub fn run(config: &RunConfig) -> Result<RunTrace> {
    match config.mode {
        Mode::Sequential => run_sequential(config),
        Mode::Sync => run_sync(config),
        Mode::AsyncSimulated => run_async_simulated(config),
        Mode::AsyncThreaded => run_async_threaded(config),
    }
}

pub(crate) fn check_mode(config: &RunConfig, mode: Mode) -> Result<()> {
    if config.mode == mode {
        Ok(())
    } else {
        Err(Error::Validation(format!("config mode is {}, expected {mode}", config.mode)))
    }
}

pub(crate) fn descend(x: &mut [f64], alpha: f64, g: &[f64]) {
    for (xi, gi) in x.iter_mut().zip(g) {
        *xi -= alpha * gi;
    }
}
