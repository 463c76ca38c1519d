//! Python bindings. Reports cross the boundary as plain dicts; configs may be
//! given as dicts or JSON strings.

use std::collections::BTreeMap;
use std::fs::File;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyString;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use ::stalestep as core;
use core::analysis::{self, BoundsInput, MomentumParams, StepMoments};
use core::distributions::{self, Family, StalenessHistogram, StalenessModel};
use core::engine::{self, RunConfig, RunSummary, RunTrace};
use core::problems::ProblemSpec;
use core::steppolicy::{self, PolicyWrapper, StepPolicy, StepSize};

fn err(e: core::Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(format!("{}: {e}", e.kind()))
    }
}

trait OrPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> OrPy<T> for core::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(err)
    }
}

fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

/// Accepts a dict (or anything `json.dumps` takes) or a JSON string.
fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = if obj.is_instance_of::<PyString>() {
        obj.extract()?
    } else {
        obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?
    };
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Staleness distribution: `StalenessModel("poisson:8")`, `"geom:0.3"`, `"cmp:8,1"`, `"unif:5"`.
#[pyclass(name = "StalenessModel", module = "stalestep", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModel(StalenessModel);

#[pymethods]
impl PyModel {
    #[new]
    fn new(spec: &str) -> PyResult<Self> {
        spec.parse().py_err().map(PyModel)
    }

    #[staticmethod]
    fn geometric(p: f64) -> PyResult<Self> {
        checked(StalenessModel::Geometric { p })
    }

    #[staticmethod]
    fn uniform(max: u64) -> PyResult<Self> {
        checked(StalenessModel::Uniform { max })
    }

    #[staticmethod]
    fn poisson(lam: f64) -> PyResult<Self> {
        checked(StalenessModel::Poisson { lambda: lam })
    }

    #[staticmethod]
    fn cmp(lam: f64, nu: f64) -> PyResult<Self> {
        checked(StalenessModel::Cmp { lambda: lam, nu })
    }

    #[getter]
    fn family(&self) -> &'static str {
        self.0.family().name()
    }

    fn pmf(&self, i: u64) -> PyResult<f64> {
        self.0.pmf(i).py_err()
    }

    /// `pmf(0..n)` over the support holding all but 1e-12 of the mass.
    fn pmf_table(&self) -> PyResult<Vec<f64>> {
        self.0.pmf_table().py_err()
    }

    fn mode(&self) -> PyResult<u64> {
        self.0.mode().py_err()
    }

    fn mean(&self) -> PyResult<f64> {
        self.0.mean().py_err()
    }

    fn sample(&self, n: usize, seed: u64) -> PyResult<Vec<u64>> {
        let sampler = self.0.sampler().py_err()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n).map(|_| sampler.sample(&mut rng)).collect())
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0)
    }

    fn __repr__(&self) -> String {
        format!("StalenessModel('{}')", self.0)
    }

    fn __str__(&self) -> String {
        self.0.to_string()
    }
}

fn checked(m: StalenessModel) -> PyResult<PyModel> {
    m.validate().py_err()?;
    Ok(PyModel(m))
}

/// Staleness counts.
#[pyclass(name = "Histogram", module = "stalestep", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyHistogram(StalenessHistogram);

#[pymethods]
impl PyHistogram {
    /// From a `{tau: count}` dict.
    #[new]
    fn new(counts: BTreeMap<u64, u64>) -> PyResult<Self> {
        StalenessHistogram::from_counts(counts).py_err().map(PyHistogram)
    }

    #[staticmethod]
    fn from_samples(samples: Vec<u64>) -> PyResult<Self> {
        StalenessHistogram::from_samples(samples).py_err().map(PyHistogram)
    }

    /// Reads a `tau,count` CSV.
    #[staticmethod]
    fn read_csv(path: &str) -> PyResult<Self> {
        let f = File::open(path).map_err(|e| PyValueError::new_err(format!("cannot read {path}: {e}")))?;
        StalenessHistogram::read_csv(f).py_err().map(PyHistogram)
    }

    fn write_csv(&self, path: &str) -> PyResult<()> {
        let f = File::create(path).map_err(|e| PyValueError::new_err(format!("cannot create {path}: {e}")))?;
        self.0.write_csv(f).py_err()
    }

    fn counts(&self) -> BTreeMap<u64, u64> {
        self.0.counts().clone()
    }

    #[getter]
    fn total(&self) -> u64 {
        self.0.total()
    }

    fn mean(&self) -> f64 {
        self.0.mean()
    }

    fn mode(&self) -> u64 {
        self.0.mode()
    }

    /// Bhattacharyya distance to `model`.
    fn distance(&self, model: &PyModel) -> PyResult<f64> {
        distributions::bhattacharyya(&self.0, &model.0).py_err()
    }

    fn __repr__(&self) -> String {
        format!("Histogram(total={}, mean={:.4}, mode={})", self.0.total(), self.0.mean(), self.0.mode())
    }
}

/// Grid fit of one family (or `"all"`, returning a list sorted by distance).
#[pyfunction]
#[pyo3(signature = (hist, family = "all", workers = None))]
fn fit<'py>(py: Python<'py>, hist: &PyHistogram, family: &str, workers: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
    let families: Vec<Family> = if family == "all" {
        Family::ALL.iter().copied().filter(|f| *f != Family::Cmp || workers.is_some()).collect()
    } else {
        vec![family.parse().py_err()?]
    };
    let mut reports = families
        .into_iter()
        .map(|f| distributions::fit(&hist.0, f, workers))
        .collect::<core::Result<Vec<_>>>()
        .py_err()?;
    reports.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    let json: Vec<_> = reports.iter().map(|r| r.to_json()).collect();
    if family == "all" {
        to_py(py, &json)
    } else {
        to_py(py, &json[0])
    }
}

/// Step-size policy with optional normalization, clipping and cutoff.
#[pyclass(name = "Policy", module = "stalestep", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPolicy(PolicyWrapper);

#[pymethods]
impl PyPolicy {
    /// `const:α`, `inv-tau:α`, `geom-tuned:p,μ,α`, `cmp-zero:λ,ν,C,α`,
    /// `cmp-tune:λ,ν,K,α`, `poisson-tune:λ,K,α`; with `model` the distribution
    /// parameters may be omitted.
    #[new]
    #[pyo3(signature = (spec, model = None))]
    fn new(spec: &str, model: Option<&PyModel>) -> PyResult<Self> {
        let p = StepPolicy::parse(spec, model.map(|m| &m.0)).py_err()?;
        p.validate().py_err()?;
        Ok(PyPolicy(p.into()))
    }

    /// Geometric policy whose implicit momentum under `Geometric(p)` is `mu`.
    #[staticmethod]
    fn geometric_tuned(p: f64, mu: f64, alpha: f64) -> PyResult<Self> {
        StepPolicy::geometric_tuned(p, mu, alpha).py_err().map(|s| PyPolicy(s.into()))
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.0.inner.kind()
    }

    #[getter]
    fn scale(&self) -> f64 {
        self.0.scale()
    }

    fn step(&self, tau: u64) -> f64 {
        self.0.step(tau)
    }

    fn ln_step(&self, tau: u64) -> f64 {
        self.0.ln_step(tau)
    }

    fn steps(&self, taus: Vec<u64>) -> Vec<f64> {
        taus.into_iter().map(|t| self.0.step(t)).collect()
    }

    /// Rescaled so the histogram-weighted mean step is `alpha_c`.
    fn normalized(&self, hist: &PyHistogram, alpha_c: f64) -> PyResult<Self> {
        self.0.clone().normalized(&hist.0, alpha_c).py_err().map(PyPolicy)
    }

    #[pyo3(signature = (mult = steppolicy::DEFAULT_CLIP_MULT, cutoff = steppolicy::DEFAULT_CUTOFF))]
    fn clipped(&self, mult: f64, cutoff: u64) -> PyResult<Self> {
        self.0.clone().clipped(mult, cutoff).py_err().map(PyPolicy)
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0)
    }

    fn __repr__(&self) -> String {
        let mut s = format!("Policy('{}'", self.0.inner);
        if self.0.normalization.is_some() {
            s += &format!(", scale={}", self.0.scale());
        }
        if let Some(c) = self.0.clip {
            s += &format!(", clip={}", c.mult * c.base_alpha);
        }
        if let Some(c) = self.0.cutoff {
            s += &format!(", cutoff={c}");
        }
        s + ")"
    }
}

#[pyfunction]
fn derive_c_for_momentum(p: f64, mu: f64) -> PyResult<f64> {
    steppolicy::derive_c_for_momentum(p, mu).py_err()
}

#[pyfunction]
fn implied_momentum(p: f64, c: f64) -> f64 {
    steppolicy::implied_momentum(p, c)
}

#[pyfunction]
#[pyo3(signature = (model, policy, imax = 150))]
fn drift_report<'py>(py: Python<'py>, model: &PyModel, policy: &PyPolicy, imax: u64) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &analysis::drift_report(&model.0, &policy.0.inner, imax).py_err()?)
}

/// Step size and update count for a constant step chosen by `theta`.
#[pyfunction]
#[pyo3(signature = (c, L, M, eps, d0 = 1.0, tau_bar = 0.0, theta = 1.0))]
#[allow(non_snake_case)]
fn alpha_choice_and_bound<'py>(
    py: Python<'py>,
    c: f64,
    L: f64,
    M: f64,
    eps: f64,
    d0: f64,
    tau_bar: f64,
    theta: f64,
) -> PyResult<(f64, Bound<'py, PyAny>)> {
    let input = BoundsInput { c, l: L, m: M, eps, d0, tau_bar };
    let (alpha, r) = analysis::alpha_choice_and_bound(&input, theta).py_err()?;
    Ok((alpha, to_py(py, &r)?))
}

/// General bound with step moments taken under `model` for `policy`.
#[pyfunction]
#[pyo3(signature = (c, L, M, eps, model, policy, d0 = 1.0))]
#[allow(non_snake_case)]
fn bound_general<'py>(
    py: Python<'py>,
    c: f64,
    L: f64,
    M: f64,
    eps: f64,
    model: &PyModel,
    policy: &PyPolicy,
    d0: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let moments = StepMoments::from_model(&model.0, &policy.0).py_err()?;
    let input = BoundsInput { c, l: L, m: M, eps, d0, tau_bar: moments.tau_bar };
    to_py(py, &analysis::bound_general(&input, &moments).py_err()?)
}

#[pyfunction]
#[pyo3(signature = (c, L, M, eps, model, policy, d0 = 1.0))]
#[allow(non_snake_case)]
fn bound_decaying<'py>(
    py: Python<'py>,
    c: f64,
    L: f64,
    M: f64,
    eps: f64,
    model: &PyModel,
    policy: &PyPolicy,
    d0: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let input = BoundsInput { c, l: L, m: M, eps, d0, tau_bar: 0.0 };
    to_py(py, &analysis::bound_decaying(&model.0, &policy.0, &input).py_err()?)
}

/// Result of [`run`].
#[pyclass(name = "RunResult", module = "stalestep", frozen)]
struct PyRun {
    config: RunConfig,
    trace: RunTrace,
}

#[pymethods]
impl PyRun {
    #[getter]
    fn final_x(&self) -> Vec<f64> {
        self.trace.final_x.clone()
    }

    #[getter]
    fn final_loss(&self) -> Option<f64> {
        self.trace.final_loss()
    }

    #[getter]
    fn final_dist2(&self) -> Option<f64> {
        self.trace.final_dist2()
    }

    #[getter]
    fn updates_to_threshold(&self) -> Option<u64> {
        self.trace.updates_to_threshold
    }

    #[getter]
    fn histogram(&self) -> PyHistogram {
        PyHistogram(self.trace.histogram.clone())
    }

    #[getter]
    fn taus(&self) -> Vec<u64> {
        self.trace.records.iter().map(|r| r.tau).collect()
    }

    #[getter]
    fn alphas(&self) -> Vec<f64> {
        self.trace.records.iter().map(|r| r.alpha).collect()
    }

    /// `(step, loss)` at the sampled points.
    fn losses(&self) -> Vec<(u64, f64)> {
        self.trace.records.iter().filter_map(|r| r.loss.map(|l| (r.step, l))).collect()
    }

    #[getter]
    fn iterates(&self) -> Option<Vec<Vec<f64>>> {
        self.trace.iterates.clone()
    }

    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &RunSummary::new(&self.config, &self.trace).py_err()?)
    }

    fn write_trace(&self, path: &str) -> PyResult<()> {
        let f = File::create(path).map_err(|e| PyValueError::new_err(format!("cannot create {path}: {e}")))?;
        self.trace.write_trace_csv(f).py_err()
    }

    fn __len__(&self) -> usize {
        self.trace.records.len()
    }
}

/// Runs a config given as a dict or JSON string (the `config` field of a run summary).
#[pyfunction]
fn run(py: Python<'_>, config: &Bound<'_, PyAny>) -> PyResult<PyRun> {
    let config: RunConfig = from_py(config)?;
    let trace = py.detach(|| engine::run(&config)).py_err()?;
    Ok(PyRun { config, trace })
}

/// Implicit momentum of `iterates` (`x_0..x_T`) on `problem` (preset name, dict or JSON).
#[pyfunction]
#[pyo3(signature = (iterates, problem, lags = 30, fit_lags = 15, warmup = 0.1, blocks = 10))]
fn estimate_implicit_momentum<'py>(
    py: Python<'py>,
    iterates: Vec<Vec<f64>>,
    problem: &Bound<'py, PyAny>,
    lags: usize,
    fit_lags: usize,
    warmup: f64,
    blocks: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let spec: ProblemSpec = match problem.extract::<String>() {
        Ok(s) if !s.trim_start().starts_with('{') => ProblemSpec::preset(&s).py_err()?,
        _ => from_py(problem)?,
    };
    let p = spec.build().py_err()?;
    let params = MomentumParams { lags, fit_lags, warmup, blocks };
    let est = py.detach(|| analysis::estimate_implicit_momentum(&iterates, &p, params)).py_err()?;
    to_py(py, &est)
}

#[pyfunction]
fn log_factorial(n: u64) -> f64 {
    core::specialfn::log_factorial(n)
}

#[pyfunction]
fn cmp_normalizer(lam: f64, nu: f64) -> PyResult<f64> {
    core::specialfn::cmp_normalizer(lam, nu).py_err().map(|z| z.value)
}

#[pyfunction]
fn regularized_upper_gamma(tau: u64, lam: f64) -> f64 {
    core::specialfn::regularized_upper_gamma(tau, lam)
}

#[pymodule]
fn stalestep(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyHistogram>()?;
    m.add_class::<PyPolicy>()?;
    m.add_class::<PyRun>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(derive_c_for_momentum, m)?)?;
    m.add_function(wrap_pyfunction!(implied_momentum, m)?)?;
    m.add_function(wrap_pyfunction!(drift_report, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_choice_and_bound, m)?)?;
    m.add_function(wrap_pyfunction!(bound_general, m)?)?;
    m.add_function(wrap_pyfunction!(bound_decaying, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_implicit_momentum, m)?)?;
    m.add_function(wrap_pyfunction!(log_factorial, m)?)?;
    m.add_function(wrap_pyfunction!(cmp_normalizer, m)?)?;
    m.add_function(wrap_pyfunction!(regularized_upper_gamma, m)?)?;
    Ok(())
}
