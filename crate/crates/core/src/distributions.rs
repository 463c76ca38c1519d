//! Parametric staleness models, empirical staleness histograms and
//! Bhattacharyya-distance model fitting.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Geometric, Poisson};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::specialfn::{cmp_normalizer, ln_cmp_term, log_factorial};

/// Infinite-support pmfs are truncated once this much mass has been covered...
pub const TRUNCATION_MASS: f64 = 1.0 - 1e-12;
/// ...or at this many points, whichever comes first.
pub const MAX_SUPPORT: usize = 10_000;

/// Ratio tolerance under which two neighbouring pmf values count as tied.
const MODE_TIE_TOL: f64 = 1e-12;

/// Model family, without parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Geometric,
    Uniform,
    Poisson,
    Cmp,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Geometric, Family::Uniform, Family::Poisson, Family::Cmp];

    pub fn name(self) -> &'static str {
        match self {
            Family::Geometric => "geometric",
            Family::Uniform => "uniform",
            Family::Poisson => "poisson",
            Family::Cmp => "cmp",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "geometric" | "geom" => Ok(Family::Geometric),
            "uniform" | "unif" => Ok(Family::Uniform),
            "poisson" | "pois" => Ok(Family::Poisson),
            "cmp" => Ok(Family::Cmp),
            other => Err(Error::Input(format!("unknown distribution family '{other}'"))),
        }
    }
}

/// A distribution over the staleness `τ ∈ {0, 1, 2, ...}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum StalenessModel {
    /// `P[τ = k] = p (1 − p)^k`.
    Geometric { p: f64 },
    /// `P[τ = k] = 1/(max + 1)` for `k ∈ {0, ..., max}`.
    Uniform { max: u64 },
    Poisson { lambda: f64 },
    /// Conway-Maxwell-Poisson: `P[τ = k] ∝ λ^k / (k!)^ν`.
    Cmp { lambda: f64, nu: f64 },
}

impl StalenessModel {
    pub fn family(&self) -> Family {
        match self {
            StalenessModel::Geometric { .. } => Family::Geometric,
            StalenessModel::Uniform { .. } => Family::Uniform,
            StalenessModel::Poisson { .. } => Family::Poisson,
            StalenessModel::Cmp { .. } => Family::Cmp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            StalenessModel::Geometric { p } if !(p > 0.0 && p <= 1.0) => {
                Err(Error::Parameter(format!("geometric p must lie in (0, 1], got {p}")))
            }
            StalenessModel::Poisson { lambda } if !(lambda > 0.0 && lambda.is_finite()) => {
                Err(Error::Parameter(format!("poisson λ must be positive, got {lambda}")))
            }
            StalenessModel::Cmp { lambda, .. } if !(lambda > 0.0 && lambda.is_finite()) => {
                Err(Error::Parameter(format!("CMP λ must be positive, got {lambda}")))
            }
            StalenessModel::Cmp { nu, .. } if !(nu > 0.0 && nu.is_finite()) => {
                Err(Error::Parameter(format!("CMP ν must be positive, got {nu}")))
            }
            _ => Ok(()),
        }
    }

    /// Validates the model and caches whatever the pmf needs (the CMP normalizer).
    pub fn pmf_evaluator(&self) -> Result<PmfEvaluator> {
        self.validate()?;
        let ln_norm = match *self {
            StalenessModel::Cmp { lambda, nu } => cmp_normalizer(lambda, nu)?.ln_value,
            StalenessModel::Poisson { lambda } => lambda,
            _ => 0.0,
        };
        Ok(PmfEvaluator { model: *self, ln_norm })
    }

    /// `P[τ = i]`. Builds the normalizer on every call; use [`pmf_evaluator`]
    /// for repeated evaluation.
    ///
    /// [`pmf_evaluator`]: StalenessModel::pmf_evaluator
    pub fn pmf(&self, i: u64) -> Result<f64> {
        Ok(self.pmf_evaluator()?.pmf(i))
    }

    /// The most likely staleness value. Exact ties go to the smaller value, so
    /// e.g. `Poisson(16)` (where `P[15] = P[16]`) reports 15.
    pub fn mode(&self) -> Result<u64> {
        self.validate()?;
        Ok(match *self {
            StalenessModel::Geometric { .. } | StalenessModel::Uniform { .. } => 0,
            StalenessModel::Poisson { lambda } => cmp_mode(lambda, 1.0),
            StalenessModel::Cmp { lambda, nu } => cmp_mode(lambda, nu),
        })
    }

    /// The pmf on `0..n`, where `n` is the truncation point: the whole support
    /// for the uniform model, otherwise the first index at which the cumulative
    /// mass reaches [`TRUNCATION_MASS`] (capped at [`MAX_SUPPORT`]).
    pub fn pmf_table(&self) -> Result<Vec<f64>> {
        let eval = self.pmf_evaluator()?;
        if let StalenessModel::Uniform { max } = *self {
            let n = (max as usize + 1).min(MAX_SUPPORT);
            return Ok(vec![1.0 / (max as f64 + 1.0); n]);
        }
        let mut table = Vec::new();
        let mut cumulative = 0.0;
        // Kahan-compensated so the stopping rule is not fooled by rounding.
        let mut carry = 0.0;
        for i in 0..MAX_SUPPORT as u64 {
            let p = eval.pmf(i);
            table.push(p);
            let y = p - carry;
            let t = cumulative + y;
            carry = (t - cumulative) - y;
            cumulative = t;
            if cumulative >= TRUNCATION_MASS {
                break;
            }
        }
        Ok(table)
    }

    pub fn mean(&self) -> Result<f64> {
        self.validate()?;
        Ok(match *self {
            StalenessModel::Geometric { p } => (1.0 - p) / p,
            StalenessModel::Uniform { max } => max as f64 / 2.0,
            StalenessModel::Poisson { lambda } => lambda,
            StalenessModel::Cmp { .. } => self
                .pmf_table()?
                .iter()
                .enumerate()
                .map(|(i, p)| i as f64 * p)
                .sum(),
        })
    }

    pub fn sampler(&self) -> Result<StalenessSampler> {
        self.validate()?;
        let inner = match *self {
            StalenessModel::Geometric { p } => SamplerKind::Geometric(
                Geometric::new(p).map_err(|e| Error::Parameter(e.to_string()))?,
            ),
            StalenessModel::Uniform { max } => SamplerKind::Uniform(max),
            StalenessModel::Poisson { lambda } => SamplerKind::Poisson(
                Poisson::new(lambda).map_err(|e| Error::Parameter(e.to_string()))?,
            ),
            StalenessModel::Cmp { .. } => {
                let mut cdf = self.pmf_table()?;
                let mut acc = 0.0;
                for v in cdf.iter_mut() {
                    acc += *v;
                    *v = acc;
                }
                SamplerKind::Table(cdf)
            }
        };
        Ok(StalenessSampler { inner })
    }

    /// One draw; builds a sampler each call.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<u64> {
        Ok(self.sampler()?.sample(rng))
    }

    pub fn params_json(&self) -> serde_json::Value {
        match *self {
            StalenessModel::Geometric { p } => json!({ "p": p }),
            StalenessModel::Uniform { max } => json!({ "max": max }),
            StalenessModel::Poisson { lambda } => json!({ "lambda": lambda }),
            StalenessModel::Cmp { lambda, nu } => json!({ "lambda": lambda, "nu": nu }),
        }
    }
}

impl fmt::Display for StalenessModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            StalenessModel::Geometric { p } => write!(f, "geom:{p}"),
            StalenessModel::Uniform { max } => write!(f, "unif:{max}"),
            StalenessModel::Poisson { lambda } => write!(f, "poisson:{lambda}"),
            StalenessModel::Cmp { lambda, nu } => write!(f, "cmp:{lambda},{nu}"),
        }
    }
}

/// Parses `geom:p`, `unif:max`, `poisson:λ` and `cmp:λ,ν`.
impl FromStr for StalenessModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, args) = s
            .split_once(':')
            .ok_or_else(|| Error::Input(format!("model '{s}' is not of the form family:params")))?;
        let nums: Vec<f64> = args
            .split(',')
            .map(|a| {
                a.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Input(format!("bad number '{a}' in model '{s}'")))
            })
            .collect::<Result<_>>()?;
        let want = |n: usize| {
            if nums.len() == n {
                Ok(())
            } else {
                Err(Error::Input(format!("model '{s}' expects {n} parameter(s)")))
            }
        };
        let model = match head.parse::<Family>()? {
            Family::Geometric => {
                want(1)?;
                StalenessModel::Geometric { p: nums[0] }
            }
            Family::Uniform => {
                want(1)?;
                if nums[0] < 0.0 || nums[0].fract() != 0.0 {
                    return Err(Error::Parameter(format!("uniform bound must be a non-negative integer, got {}", nums[0])));
                }
                StalenessModel::Uniform { max: nums[0] as u64 }
            }
            Family::Poisson => {
                want(1)?;
                StalenessModel::Poisson { lambda: nums[0] }
            }
            Family::Cmp => {
                want(2)?;
                StalenessModel::Cmp { lambda: nums[0], nu: nums[1] }
            }
        };
        model.validate()?;
        Ok(model)
    }
}

fn cmp_mode(lambda: f64, nu: f64) -> u64 {
    let x = lambda.powf(1.0 / nu);
    let nearest = x.round();
    if nearest >= 1.0 && (lambda.ln() - nu * nearest.ln()).abs() <= MODE_TIE_TOL {
        // P[k] / P[k−1] = λ / k^ν = 1: tied, take the smaller index.
        return nearest as u64 - 1;
    }
    x.floor() as u64
}

/// A validated model with its normalizer precomputed.
#[derive(Debug, Clone, Copy)]
pub struct PmfEvaluator {
    model: StalenessModel,
    ln_norm: f64,
}

impl PmfEvaluator {
    pub fn model(&self) -> &StalenessModel {
        &self.model
    }

    pub fn ln_pmf(&self, i: u64) -> f64 {
        match self.model {
            StalenessModel::Geometric { p } => {
                if p == 1.0 {
                    if i == 0 {
                        0.0
                    } else {
                        f64::NEG_INFINITY
                    }
                } else {
                    p.ln() + i as f64 * (-p).ln_1p()
                }
            }
            StalenessModel::Uniform { max } => {
                if i <= max {
                    -(max as f64 + 1.0).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            StalenessModel::Poisson { lambda } => {
                i as f64 * lambda.ln() - lambda - log_factorial(i)
            }
            StalenessModel::Cmp { lambda, nu } => ln_cmp_term(lambda.ln(), nu, i) - self.ln_norm,
        }
    }

    pub fn pmf(&self, i: u64) -> f64 {
        self.ln_pmf(i).exp()
    }
}

#[derive(Debug, Clone)]
enum SamplerKind {
    Geometric(Geometric),
    Uniform(u64),
    Poisson(Poisson<f64>),
    Table(Vec<f64>),
}

/// Draws staleness values from a model. Deterministic given the caller's rng.
#[derive(Debug, Clone)]
pub struct StalenessSampler {
    inner: SamplerKind,
}

impl StalenessSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match &self.inner {
            SamplerKind::Geometric(g) => g.sample(rng),
            SamplerKind::Uniform(max) => rng.random_range(0..=*max),
            SamplerKind::Poisson(p) => p.sample(rng) as u64,
            SamplerKind::Table(cdf) => {
                let u: f64 = rng.random();
                cdf.partition_point(|&c| c < u).min(cdf.len() - 1) as u64
            }
        }
    }
}

/// Observed staleness counts. Serializes as a `{"τ": count}` map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<u64, u64>", into = "BTreeMap<u64, u64>")]
pub struct StalenessHistogram {
    counts: BTreeMap<u64, u64>,
    total: u64,
}

impl TryFrom<BTreeMap<u64, u64>> for StalenessHistogram {
    type Error = Error;

    fn try_from(counts: BTreeMap<u64, u64>) -> Result<Self> {
        Self::from_counts(counts)
    }
}

impl From<StalenessHistogram> for BTreeMap<u64, u64> {
    fn from(h: StalenessHistogram) -> Self {
        h.counts
    }
}

impl StalenessHistogram {
    /// Fails unless at least one count is positive. Zero counts are dropped.
    pub fn from_counts(counts: impl IntoIterator<Item = (u64, u64)>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (tau, c) in counts {
            if c > 0 {
                *map.entry(tau).or_insert(0) += c;
            }
        }
        let total = map.values().sum();
        if total == 0 {
            return Err(Error::Input("staleness histogram is empty".into()));
        }
        Ok(StalenessHistogram { counts: map, total })
    }

    pub fn from_samples(samples: impl IntoIterator<Item = u64>) -> Result<Self> {
        Self::from_counts(samples.into_iter().map(|t| (t, 1)))
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn counts(&self) -> &BTreeMap<u64, u64> {
        &self.counts
    }

    pub fn count(&self, tau: u64) -> u64 {
        self.counts.get(&tau).copied().unwrap_or(0)
    }

    pub fn max_tau(&self) -> u64 {
        *self.counts.keys().next_back().expect("histogram is non-empty")
    }

    /// `(τ, count/total)` in increasing `τ`.
    pub fn frequencies(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        let total = self.total as f64;
        self.counts.iter().map(move |(&t, &c)| (t, c as f64 / total))
    }

    pub fn mean(&self) -> f64 {
        self.frequencies().map(|(t, q)| t as f64 * q).sum()
    }

    /// Most frequent value, smallest on ties.
    pub fn mode(&self) -> u64 {
        let mut best = (0, 0);
        for (&t, &c) in &self.counts {
            if c > best.1 {
                best = (t, c);
            }
        }
        best.0
    }

    /// Reads the `tau,count` CSV format (header required, rows strictly
    /// increasing in `tau`).
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() != 2 || &headers[0] != "tau" || &headers[1] != "count" {
            return Err(Error::Input(format!(
                "histogram header must be 'tau,count', got '{}'",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut rows = Vec::new();
        let mut last: Option<u64> = None;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |field: &str| {
                field.parse::<u64>().map_err(|_| {
                    Error::Input(format!("row {}: '{field}' is not a non-negative integer", line + 2))
                })
            };
            let tau = parse(&rec[0])?;
            let count = parse(&rec[1])?;
            if last.is_some_and(|prev| tau <= prev) {
                return Err(Error::Input(format!("row {}: tau values must be strictly increasing", line + 2)));
            }
            last = Some(tau);
            rows.push((tau, count));
        }
        Self::from_counts(rows)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["tau", "count"])?;
        for (t, c) in &self.counts {
            w.write_record([t.to_string(), c.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Bhattacharyya coefficient `Σ √(q_i p_i)` between a histogram and a model.
///
/// Only the histogram's support contributes, so no truncation is needed.
pub fn bhattacharyya_coefficient(hist: &StalenessHistogram, eval: &PmfEvaluator) -> f64 {
    hist.frequencies()
        .map(|(t, q)| (0.5 * (q.ln() + eval.ln_pmf(t))).exp())
        .sum()
}

/// Bhattacharyya distance `−ln Σ √(q_i p_i)`, `+inf` when the supports do not overlap.
pub fn bhattacharyya(hist: &StalenessHistogram, model: &StalenessModel) -> Result<f64> {
    let eval = model.pmf_evaluator()?;
    Ok(distance_from_coefficient(bhattacharyya_coefficient(hist, &eval)))
}

fn distance_from_coefficient(bc: f64) -> f64 {
    if bc <= 0.0 {
        f64::INFINITY
    } else {
        (-bc.ln()).max(0.0)
    }
}

/// The parameter grid a fit scanned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitGrid {
    pub parameter: String,
    pub start: f64,
    pub stop: f64,
    pub step: f64,
    pub points: usize,
    /// Worker count used to tie `λ = m^ν` for CMP fits.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub model: StalenessModel,
    /// `+inf` if no grid point overlaps the histogram.
    pub distance: f64,
    pub grid: FitGrid,
}

impl FitReport {
    pub fn degenerate(&self) -> bool {
        !self.distance.is_finite()
    }

    /// `{family, params, distance, grid}`; an infinite distance is written as
    /// `null` with `"degenerate": true`.
    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "family": self.model.family().name(),
            "params": self.model.params_json(),
            "distance": if self.distance.is_finite() { json!(self.distance) } else { serde_json::Value::Null },
            "degenerate": self.degenerate(),
            "grid": self.grid,
        })
    }
}

/// Exhaustive grid search for the family member closest to `hist` in
/// Bhattacharyya distance. The first grid point wins ties.
///
/// `workers` is required for [`Family::Cmp`], which is searched along
/// `λ = m^ν`.
pub fn fit(hist: &StalenessHistogram, family: Family, workers: Option<u64>) -> Result<FitReport> {
    let max_tau = hist.max_tau();
    let (grid, candidates): (FitGrid, Vec<StalenessModel>) = match family {
        Family::Geometric => (
            FitGrid { parameter: "p".into(), start: 0.001, stop: 0.999, step: 0.001, points: 999, workers: None },
            (1..=999).map(|k| StalenessModel::Geometric { p: k as f64 / 1000.0 }).collect(),
        ),
        Family::Uniform => {
            let stop = max_tau + 5;
            (
                FitGrid {
                    parameter: "max".into(),
                    start: 0.0,
                    stop: stop as f64,
                    step: 1.0,
                    points: stop as usize + 1,
                    workers: None,
                },
                (0..=stop).map(|max| StalenessModel::Uniform { max }).collect(),
            )
        }
        Family::Poisson => {
            let last = (20 * max_tau).max(1);
            (
                FitGrid {
                    parameter: "lambda".into(),
                    start: 0.1,
                    stop: last as f64 / 10.0,
                    step: 0.1,
                    points: last as usize,
                    workers: None,
                },
                (1..=last).map(|k| StalenessModel::Poisson { lambda: k as f64 / 10.0 }).collect(),
            )
        }
        Family::Cmp => {
            let m = workers
                .filter(|&m| m >= 1)
                .ok_or_else(|| Error::Input("CMP fit needs a worker count m ≥ 1".into()))?;
            (
                FitGrid { parameter: "nu".into(), start: 0.05, stop: 10.0, step: 0.01, points: 996, workers: Some(m) },
                (5..=1000)
                    .map(|k| {
                        let nu = k as f64 / 100.0;
                        StalenessModel::Cmp { lambda: (m as f64).powf(nu), nu }
                    })
                    .collect(),
            )
        }
    };

    let mut best: Option<(StalenessModel, f64)> = None;
    for model in candidates {
        let eval = match model.pmf_evaluator() {
            Ok(e) => e,
            // A grid point whose normalizer does not converge cannot be the fit.
            Err(Error::Numeric { .. }) => continue,
            Err(e) => return Err(e),
        };
        let d = distance_from_coefficient(bhattacharyya_coefficient(hist, &eval));
        match best {
            Some((_, bd)) if !(d < bd) => {}
            _ => best = Some((model, d)),
        }
    }
    let (model, distance) = best.ok_or_else(|| Error::Numeric {
        what: "fit",
        detail: format!("no valid {family} model on the grid"),
    })?;
    Ok(FitReport { model, distance, grid })
}
