use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::Rng;
use rand_distr::{Exp, Gamma};

use super::{
    check_mode, descend, update_rng, ComputeTime, DelaySource, Mode, Recorder, RunConfig, RunTrace, DELAY_STREAM,
    EVENT_STREAM,
};
use crate::error::{Error, Result};
use crate::problems::Problem;
use crate::steppolicy::{PolicyWrapper, StepSize};

/// Asynchronous SGD in virtual time; deterministic given the seed.
pub fn run_async_simulated(config: &RunConfig) -> Result<RunTrace> {
    check_mode(config, Mode::AsyncSimulated)?;
    let (problem, policy) = config.prepare()?;
    match config.delay.as_ref().expect("validated") {
        DelaySource::EventDriven { compute, apply_time } => {
            event_driven(config, &problem, &policy, *compute, *apply_time)
        }
        source => sampled(config, &problem, &policy, source),
    }
}

/// Each update draws `τ` independently and uses the gradient at `x_{t'−τ}`,
/// `t'` counting applied updates. A ring keeps the last `H + 1` iterates.
fn sampled(config: &RunConfig, problem: &Problem, policy: &PolicyWrapper, source: &DelaySource) -> Result<RunTrace> {
    let history = config.history as usize;
    let mut delay_rng = update_rng(config.seed, DELAY_STREAM, 0);
    let mut draw: Box<dyn FnMut(&mut rand_chacha::ChaCha8Rng) -> u64> = match source {
        DelaySource::Fixed { tau } => {
            let tau = *tau;
            Box::new(move |_| tau)
        }
        DelaySource::Model { model } => {
            let sampler = model.sampler()?;
            Box::new(move |rng| sampler.sample(rng))
        }
        DelaySource::EventDriven { .. } => unreachable!(),
    };
    let x0 = problem.x0();
    let d = x0.len();
    let mut rec = Recorder::new(config, problem, &x0);
    // ring[0] is the current iterate, ring[k] the one k applied updates back.
    let mut ring: VecDeque<Vec<f64>> = VecDeque::with_capacity(history + 2);
    ring.push_front(x0);
    let mut g = vec![0.0; d];
    let mut clock: u64 = 0;
    for t in 0..config.steps {
        let mut tau = draw(&mut delay_rng);
        if tau > config.history {
            rec.clamp_event();
            tau = config.history;
        }
        let tau = tau.min(clock);
        problem.grad(&ring[tau as usize], &mut update_rng(config.seed, 0, t), &mut g)?;
        let alpha = policy.step(tau);
        if alpha > 0.0 {
            let mut next = if ring.len() > history { ring.pop_back().unwrap() } else { vec![0.0; d] };
            next.copy_from_slice(&ring[0]);
            descend(&mut next, alpha, &g);
            ring.push_front(next);
            clock += 1;
        }
        if rec.record(t, tau, alpha, &ring[0]) {
            break;
        }
    }
    let batch = problem.data_shape().map(|(_, b)| b);
    let x = ring.swap_remove_front(0).unwrap();
    Ok(rec.finish(x, batch))
}

#[derive(Debug, Clone, Copy)]
struct Arrival {
    time: f64,
    worker: usize,
}

impl PartialEq for Arrival {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Arrival {}

impl PartialOrd for Arrival {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Arrival {
    /// Reversed so that `BinaryHeap` pops the earliest arrival, lowest worker id first.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then_with(|| other.worker.cmp(&self.worker))
    }
}

enum Durations {
    Exp(Exp<f64>),
    Gamma(Gamma<f64>),
}

impl Durations {
    fn new(c: ComputeTime) -> Result<Self> {
        let bad = |e: &dyn std::fmt::Display| Error::Validation(format!("compute-time distribution: {e}"));
        Ok(match c {
            ComputeTime::Exponential { mean } => Durations::Exp(Exp::new(1.0 / mean).map_err(|e| bad(&e))?),
            ComputeTime::Gamma { shape, mean } => {
                Durations::Gamma(Gamma::new(shape, mean / shape).map_err(|e| bad(&e))?)
            }
        })
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Durations::Exp(d) => rng.sample(d),
            Durations::Gamma(d) => rng.sample(d),
        }
    }
}

/// Discrete-event simulation of a parameter server with `m` workers.
///
/// A worker reads the current parameters, computes for a random duration and
/// submits; the server applies submissions one at a time in arrival order
/// (ties by worker id), each taking `apply_time`. When its update has been
/// applied the worker reads again. Staleness is the number of applied updates
/// between a worker's read and the application of its gradient.
fn event_driven(
    config: &RunConfig,
    problem: &Problem,
    policy: &PolicyWrapper,
    compute: ComputeTime,
    apply_time: f64,
) -> Result<RunTrace> {
    let m = config.workers;
    let durations = Durations::new(compute)?;
    let mut event_rng = update_rng(config.seed, EVENT_STREAM, 0);
    let mut x = problem.x0();
    let d = x.len();
    let mut rec = Recorder::new(config, problem, &x);

    let mut pending = vec![vec![0.0; d]; m];
    let mut read_clock = vec![0u64; m];
    let mut local = vec![0u64; m];
    let mut queue = BinaryHeap::with_capacity(m);
    for w in 0..m {
        problem.grad(&x, &mut update_rng(config.seed, w as u64, 0), &mut pending[w])?;
        local[w] = 1;
        queue.push(Arrival { time: durations.draw(&mut event_rng), worker: w });
    }

    let mut clock: u64 = 0;
    let mut server_free = 0.0f64;
    for t in 0..config.steps {
        let Arrival { time, worker: w } = queue.pop().expect("every worker has one submission in flight");
        let finish = time.max(server_free) + apply_time;
        server_free = finish;
        let tau = clock - read_clock[w];
        let alpha = policy.step(tau);
        if alpha > 0.0 {
            descend(&mut x, alpha, &pending[w]);
            clock += 1;
        }
        if rec.record(t, tau, alpha, &x) {
            break;
        }
        read_clock[w] = clock;
        problem.grad(&x, &mut update_rng(config.seed, w as u64, local[w]), &mut pending[w])?;
        local[w] += 1;
        queue.push(Arrival { time: finish + durations.draw(&mut event_rng), worker: w });
    }
    let batch = problem.data_shape().map(|(_, b)| b);
    Ok(rec.finish(x, batch))
}
