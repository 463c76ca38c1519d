mod input;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use stalestep::analysis::{
    alpha_choice_and_bound, bound_decaying, bound_general, drift_report, estimate_implicit_momentum, BoundsInput,
    MomentumParams, StepMoments,
};
use stalestep::distributions::{fit, Family, StalenessHistogram, StalenessModel};
use stalestep::engine::{self, read_iterates_csv, DelaySource, Mode, RunConfig, RunSummary, DEFAULT_HISTORY};
use stalestep::experiment::{sweep, write_sweep_csv, AdaptiveTemplate, SweepConfig};
use stalestep::steppolicy::{PolicySpec, StepPolicy, DEFAULT_CLIP_MULT, DEFAULT_CUTOFF};
use stalestep::{Error, Result};

const DEFAULT_APPLY_TIME: f64 = 0.35;

#[derive(Parser)]
#[command(name = "stalestep", version, about = "Staleness-adaptive asynchronous SGD experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one SGD experiment and write its trace and summary.
    Run(RunArgs),
    /// Fit staleness models to a `tau,count` histogram.
    Fit(FitArgs),
    /// Evaluate the convergence bounds.
    Bounds(BoundsArgs),
    /// Drift coefficients or implicit momentum of a trace.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Updates-to-threshold for a constant and an adaptive step over worker counts.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Replay a config (or the `config` of a summary JSON); excludes the run flags.
    #[arg(long, conflicts_with_all = ["mode", "problem", "policy", "alpha", "steps", "seed", "workers", "batch", "data_seed", "stride", "delay", "history", "normalize_to", "clip_mult", "cutoff", "reference", "loss_threshold", "stop_at_threshold"])]
    config: Option<String>,
    /// seq, sync, async-threaded or async-sim.
    #[arg(long, default_value = "seq")]
    mode: String,
    /// Preset (quad-1d, quad, lsq, mlp), inline JSON or JSON file.
    #[arg(long, default_value = "quad")]
    problem: String,
    /// `const:α`, `poisson-tune:λ,K,α`, ..., inline JSON or JSON file.
    #[arg(long)]
    policy: Option<String>,
    /// Constant step size when no policy is given.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    stride: Option<u64>,
    /// Simulated delays: `fixed:τ`, `event[:apply_time]` or a model (`geom:p`, `poisson:λ`, `cmp:λ,ν`, `unif:max`).
    #[arg(long)]
    delay: Option<String>,
    #[arg(long)]
    history: Option<u64>,
    /// Normalize the policy so its mean step over the reference histogram is this value.
    #[arg(long, requires = "reference")]
    normalize_to: Option<f64>,
    /// Clip steps at this multiple of the reference step.
    #[arg(long)]
    clip_mult: Option<f64>,
    /// Skip updates staler than this.
    #[arg(long)]
    cutoff: Option<u64>,
    /// `tau,count` CSV the normalization uses.
    #[arg(long)]
    reference: Option<String>,
    #[arg(long)]
    loss_threshold: Option<f64>,
    #[arg(long)]
    stop_at_threshold: bool,
    /// Trace CSV (`step,tau,alpha,loss,dist2`).
    #[arg(long)]
    trace: Option<String>,
    /// Summary JSON; printed to stdout when absent.
    #[arg(long)]
    summary: Option<String>,
    /// Iterates CSV (one row per iterate).
    #[arg(long)]
    iterates: Option<String>,
    /// Estimate the implicit momentum and add it to the summary.
    #[arg(long)]
    momentum: bool,
}

#[derive(Args)]
struct FitArgs {
    /// `tau,count` CSV.
    #[arg(long)]
    hist: String,
    /// `all` or a comma-separated list of geometric, uniform, poisson, cmp.
    #[arg(long, default_value = "all")]
    family: String,
    /// Worker count; the CMP fit searches along `λ = m^ν`.
    #[arg(long)]
    workers: Option<u64>,
}

#[derive(Args)]
struct BoundsArgs {
    /// Strong convexity constant.
    #[arg(long)]
    c: f64,
    /// Lipschitz constant.
    #[arg(long = "L")]
    l: f64,
    /// Gradient second-moment bound.
    #[arg(long = "M")]
    m: f64,
    #[arg(long)]
    eps: f64,
    /// `‖x₀ − x*‖²`.
    #[arg(long, default_value_t = 1.0)]
    d0: f64,
    #[arg(long, default_value_t = 0.0)]
    tau_bar: f64,
    #[arg(long, default_value_t = 1.0)]
    theta: f64,
    /// Constant step for the general bound (defaults to the θ choice).
    #[arg(long)]
    alpha: Option<f64>,
    /// Staleness model for the model-based general and decaying bounds.
    #[arg(long, requires = "policy")]
    model: Option<String>,
    #[arg(long, requires = "model")]
    policy: Option<String>,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Drift coefficients `w(i) = p(i)α(i)` and the identity they satisfy.
    Drift {
        #[arg(long)]
        model: String,
        #[arg(long)]
        policy: String,
        #[arg(long, default_value_t = 150)]
        imax: u64,
    },
    /// Implicit momentum from a recorded iterate sequence.
    Momentum {
        /// Summary JSON of the run (for its problem).
        #[arg(long)]
        summary: String,
        #[arg(long)]
        iterates: String,
        #[arg(long, default_value_t = MomentumParams::default().lags)]
        lags: usize,
        #[arg(long, default_value_t = MomentumParams::default().fit_lags)]
        fit_lags: usize,
        #[arg(long, default_value_t = MomentumParams::default().warmup)]
        warmup: f64,
        #[arg(long, default_value_t = MomentumParams::default().blocks)]
        blocks: usize,
    },
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, default_value = "lsq")]
    problem: String,
    #[arg(long, default_value = "2,4,8,16")]
    workers: String,
    #[arg(long, default_value_t = 5)]
    repeats: u64,
    /// poisson-tune[:K], cmp-tune:ν, cmp-zero:ν or inv-tau.
    #[arg(long, default_value = "poisson-tune")]
    adaptive: String,
    /// Constant step `α_c`; the adaptive step is normalized to it.
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    #[arg(long)]
    loss_threshold: f64,
    #[arg(long, default_value_t = 100_000)]
    max_steps: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// async-sim or async-threaded.
    #[arg(long, default_value = "async-sim")]
    mode: String,
    /// Delay source for async-sim (see `run --delay`).
    #[arg(long)]
    delay: Option<String>,
    #[arg(long, default_value_t = 10)]
    stride: u64,
    #[arg(long, default_value_t = 5_000)]
    pilot_steps: u64,
    #[arg(long, default_value_t = DEFAULT_CLIP_MULT)]
    clip_mult: f64,
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    cutoff: u64,
    #[arg(long)]
    threads: Option<usize>,
    /// CSV output; stdout when absent.
    #[arg(long)]
    out: Option<String>,
}

fn create(path: &str) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::Input(format!("cannot create {path}: {e}")))
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn run_config(a: &RunArgs) -> Result<RunConfig> {
    if let Some(path) = &a.config {
        let v: serde_json::Value = input::read_json(path)?;
        let v = match v.get("config") {
            Some(inner) => inner.clone(),
            None => v,
        };
        return Ok(serde_json::from_value(v)?);
    }
    let mode: Mode = a.mode.parse()?;
    let mut problem = input::problem(&a.problem)?;
    if let Some(b) = a.batch {
        problem = problem.with_batch(b)?;
    }
    if let Some(s) = a.data_seed {
        problem = problem.with_data_seed(s);
    }
    let delay = match (&a.delay, mode) {
        (Some(d), _) => Some(input::delay(d, DEFAULT_APPLY_TIME)?),
        (None, Mode::AsyncSimulated) => Some(DelaySource::event_driven(DEFAULT_APPLY_TIME)),
        (None, _) => None,
    };
    let model = match &delay {
        Some(DelaySource::Model { model }) => Some(*model),
        _ => None,
    };
    let mut policy = match (&a.policy, a.alpha) {
        (Some(p), _) => input::policy(p, model.as_ref())?,
        (None, Some(alpha)) => PolicySpec::plain(StepPolicy::Constant { alpha }),
        (None, None) => return Err(Error::Input("give --policy or --alpha".into())),
    };
    if a.normalize_to.is_some() {
        policy.wrappers.normalize_to = a.normalize_to;
    }
    if a.clip_mult.is_some() {
        policy.wrappers.clip_mult = a.clip_mult;
    }
    if a.cutoff.is_some() {
        policy.wrappers.cutoff = a.cutoff;
    }
    let steps = a.steps.ok_or_else(|| Error::Input("--steps is required".into()))?;
    let mut c = RunConfig::new(mode, problem, policy, steps, a.seed.unwrap_or(0));
    c.workers = a.workers.unwrap_or(1);
    c.stride = a.stride.unwrap_or(1);
    c.delay = delay;
    c.history = a.history.unwrap_or(DEFAULT_HISTORY.max(c.policy.wrappers.cutoff.unwrap_or(0)));
    c.reference_histogram = match &a.reference {
        Some(path) => Some(StalenessHistogram::read_csv(
            File::open(path).map_err(|e| Error::Input(format!("cannot read {path}: {e}")))?,
        )?),
        None => None,
    };
    c.loss_threshold = a.loss_threshold;
    c.stop_at_threshold = a.stop_at_threshold;
    Ok(c)
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let config = run_config(&a)?;
    let mut exec = config.clone();
    exec.record_iterates |= a.iterates.is_some() || a.momentum;
    let trace = match engine::run(&exec) {
        Ok(t) => t,
        Err(Error::Aborted { diagnostic, partial }) => {
            if let (Some(path), Some(p)) = (&a.trace, &partial) {
                p.write_trace_csv(create(path)?)?;
            }
            return Err(Error::Aborted { diagnostic, partial });
        }
        Err(e) => return Err(e),
    };
    if let Some(path) = &a.trace {
        trace.write_trace_csv(create(path)?)?;
    }
    if let Some(path) = &a.iterates {
        trace.write_iterates_csv(create(path)?)?;
    }
    let mut summary = RunSummary::new(&config, &trace)?;
    if a.momentum {
        let problem = config.problem.build()?;
        let iterates = trace.iterates.as_deref().expect("iterates were recorded");
        summary.momentum = Some(estimate_implicit_momentum(iterates, &problem, MomentumParams::default())?);
    }
    match &a.summary {
        Some(path) => {
            let mut w = create(path)?;
            serde_json::to_writer_pretty(&mut w, &summary)?;
            writeln!(w)?;
            w.flush()?;
        }
        None => print_json(&summary)?,
    }
    Ok(())
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let file = File::open(&a.hist).map_err(|e| Error::Input(format!("cannot read {}: {e}", a.hist)))?;
    let hist = StalenessHistogram::read_csv(file)?;
    let families: Vec<Family> = if a.family == "all" { Family::ALL.to_vec() } else { input::list(&a.family, "family")? };
    let mut fits = Vec::new();
    let mut skipped = Vec::new();
    for family in families {
        if family == Family::Cmp && a.workers.is_none() {
            skipped.push(json!({ "family": "cmp", "reason": "needs --workers (λ = m^ν)" }));
            continue;
        }
        fits.push(fit(&hist, family, a.workers)?);
    }
    let mut ranking: Vec<_> = fits.iter().collect();
    ranking.sort_by(|x, y| x.distance.total_cmp(&y.distance));
    print_json(&json!({
        "total": hist.total(),
        "mean": hist.mean(),
        "mode": hist.mode(),
        "fits": fits.iter().map(|f| f.to_json()).collect::<Vec<_>>(),
        "ranking": ranking.iter().map(|f| f.model.family().name()).collect::<Vec<_>>(),
        "skipped": skipped,
    }))
}

fn cmd_bounds(a: BoundsArgs) -> Result<()> {
    let input = BoundsInput { c: a.c, l: a.l, m: a.m, eps: a.eps, d0: a.d0, tau_bar: a.tau_bar };
    let (alpha, corollary) = alpha_choice_and_bound(&input, a.theta)?;
    let (general, decaying) = match (&a.model, &a.policy) {
        (Some(m), Some(p)) => {
            let model: StalenessModel = m.parse()?;
            let policy = StepPolicy::parse(p, Some(&model))?;
            policy.validate()?;
            let moments = StepMoments::from_model(&model, &policy)?;
            let general = bound_general(&BoundsInput { tau_bar: moments.tau_bar, ..input }, &moments)?;
            let decaying = match bound_decaying(&model, &policy, &input) {
                Ok(r) => json!(r),
                Err(Error::Precondition(msg)) => json!({ "applicable": false, "reason": msg }),
                Err(e) => return Err(e),
            };
            (general, decaying)
        }
        _ => {
            let a = a.alpha.unwrap_or(alpha);
            (bound_general(&input, &StepMoments::constant(a, input.tau_bar))?, serde_json::Value::Null)
        }
    };
    print_json(&json!({
        "input": input,
        "theta": a.theta,
        "constant_alpha": corollary,
        "general": general,
        "decaying": decaying,
    }))
}

fn cmd_analyze(c: AnalyzeCommand) -> Result<()> {
    match c {
        AnalyzeCommand::Drift { model, policy, imax } => {
            let model: StalenessModel = model.parse()?;
            let policy = StepPolicy::parse(&policy, Some(&model))?;
            print_json(&drift_report(&model, &policy, imax)?)
        }
        AnalyzeCommand::Momentum { summary, iterates, lags, fit_lags, warmup, blocks } => {
            let summary: RunSummary = input::read_json(&summary)?;
            let file = File::open(&iterates).map_err(|e| Error::Input(format!("cannot read {iterates}: {e}")))?;
            let xs = read_iterates_csv(file)?;
            let problem = summary.config.problem.build()?;
            let params = MomentumParams { lags, fit_lags, warmup, blocks };
            print_json(&estimate_implicit_momentum(&xs, &problem, params)?)
        }
    }
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let problem = input::problem(&a.problem)?;
    let workers: Vec<usize> = input::list(&a.workers, "worker count")?;
    let mut c = SweepConfig::new(problem, workers, a.alpha, a.loss_threshold, a.max_steps);
    c.mode = a.mode.parse()?;
    if !matches!(c.mode, Mode::AsyncSimulated | Mode::AsyncThreaded) {
        return Err(Error::Validation(format!("sweeps run asynchronous modes, got {}", c.mode)));
    }
    c.delay = match (&a.delay, c.mode) {
        (_, Mode::AsyncThreaded) => None,
        (Some(d), _) => Some(input::delay(d, DEFAULT_APPLY_TIME)?),
        (None, _) => Some(DelaySource::event_driven(DEFAULT_APPLY_TIME)),
    };
    c.repeats = a.repeats;
    c.seed = a.seed;
    c.adaptive = a.adaptive.parse::<AdaptiveTemplate>()?;
    c.stride = a.stride;
    c.pilot_steps = a.pilot_steps;
    c.clip_mult = a.clip_mult;
    c.cutoff = a.cutoff;
    c.threads = a.threads;
    let rows = sweep(&c)?;
    match &a.out {
        Some(path) => write_sweep_csv(&rows, create(path)?),
        None => write_sweep_csv(&rows, io::stdout().lock()),
    }
}

/// Output piped into a reader that stopped early (`| head`).
fn closed_stdout(e: &Error) -> bool {
    if let Error::Io(io) = e {
        return io.kind() == io::ErrorKind::BrokenPipe;
    }
    let mut source: Option<&(dyn std::error::Error + 'static)> = Some(e);
    while let Some(err) = source {
        if err.downcast_ref::<io::Error>().is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe) {
            return true;
        }
        source = err.source();
    }
    false
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Bounds(a) => cmd_bounds(a),
        Command::Analyze(c) => cmd_analyze(c),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if closed_stdout(&e) => ExitCode::SUCCESS,
        Err(e) => {
            let body = json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{body}");
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
