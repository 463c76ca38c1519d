use super::{check_mode, descend, update_rng, Mode, Recorder, RunConfig, RunTrace};
use crate::error::{Error, Result};
use crate::problems::sample_batch;
use crate::steppolicy::StepSize;

/// Plain SGD: `x_{t+1} = x_t − α(0)·∇F(x_t)`.
pub fn run_sequential(config: &RunConfig) -> Result<RunTrace> {
    check_mode(config, Mode::Sequential)?;
    let (problem, policy) = config.prepare()?;
    let mut x = problem.x0();
    let mut g = vec![0.0; x.len()];
    let mut rec = Recorder::new(config, &problem, &x);
    let alpha = policy.step(0);
    for t in 0..config.steps {
        problem.grad(&x, &mut update_rng(config.seed, 0, t), &mut g)?;
        descend(&mut x, alpha, &g);
        if rec.record(t, 0, alpha, &x) {
            break;
        }
    }
    let batch = problem.data_shape().map(|(_, b)| b);
    Ok(rec.finish(x, batch))
}

/// Synchronous data parallelism: each update averages the gradients of `m`
/// workers over disjoint batches of size `b`.
///
/// All `m·b` indices of an update are drawn in one go without replacement and
/// split into consecutive chunks, so the draw is the one a sequential run with
/// batch `m·b` and the same seed makes.
pub fn run_sync(config: &RunConfig) -> Result<RunTrace> {
    check_mode(config, Mode::Sync)?;
    let (problem, policy) = config.prepare()?;
    let (n, b) = problem
        .data_shape()
        .ok_or_else(|| Error::Unsupported(format!("sync mode needs a mini-batch problem, got {}", problem.kind())))?;
    let m = config.workers;
    let total = m.checked_mul(b).filter(|&mb| mb <= n).ok_or_else(|| {
        Error::Validation(format!("{m} workers × batch {b} exceeds the dataset size {n}"))
    })?;
    let mut x = problem.x0();
    let d = x.len();
    let mut g = vec![0.0; d];
    let mut chunk = vec![0.0; d];
    let mut rec = Recorder::new(config, &problem, &x);
    let alpha = policy.step(0);
    for t in 0..config.steps {
        let idx = sample_batch(&mut update_rng(config.seed, 0, t), n, total);
        g.fill(0.0);
        for part in idx.chunks(b) {
            problem.batch_grad(&x, part, &mut chunk)?;
            g.iter_mut().zip(&chunk).for_each(|(a, c)| *a += c);
        }
        if m > 1 {
            let inv = 1.0 / m as f64;
            g.iter_mut().for_each(|a| *a *= inv);
        }
        descend(&mut x, alpha, &g);
        if rec.record(t, 0, alpha, &x) {
            break;
        }
    }
    Ok(rec.finish(x, Some(total)))
}
