use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::thread;

use crossbeam_channel::{unbounded, Receiver, Sender};

use super::{check_mode, descend, update_rng, Mode, Recorder, RunConfig, RunTrace};
use crate::error::{Error, Result};
use crate::problems::Problem;
use crate::steppolicy::{PolicyWrapper, StepSize};

/// Immutable parameter snapshot published by the server.
#[derive(Debug)]
struct Snapshot {
    clock: u64,
    x: Vec<f64>,
    checksum: u64,
}

impl Snapshot {
    fn new(clock: u64, x: Vec<f64>) -> Arc<Self> {
        let checksum = checksum(clock, &x);
        Arc::new(Snapshot { clock, x, checksum })
    }

    fn is_intact(&self) -> bool {
        checksum(self.clock, &self.x) == self.checksum
    }
}

/// FNV-1a over the clock and the bit patterns of the coordinates.
fn checksum(clock: u64, x: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for word in std::iter::once(clock).chain(x.iter().map(|v| v.to_bits())) {
        for byte in word.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

enum Message {
    Gradient { worker: usize, read_clock: u64, g: Vec<f64> },
    Failed { worker: usize, diagnostic: String },
}

fn panic_text(payload: &(dyn std::any::Any + Send)) -> String {
    payload
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| payload.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic with a non-string payload".into())
}

fn worker_loop<G>(
    worker: usize,
    mut snap: Arc<Snapshot>,
    grad: &G,
    submit: Sender<Message>,
    replies: Receiver<Arc<Snapshot>>,
) where
    G: Fn(usize, u64, &[f64], &mut [f64]) -> Result<()> + Sync,
{
    let mut local: u64 = 0;
    loop {
        if !snap.is_intact() {
            let diagnostic = format!("snapshot at clock {} failed its checksum", snap.clock);
            let _ = submit.send(Message::Failed { worker, diagnostic });
            return;
        }
        let mut g = vec![0.0; snap.x.len()];
        let outcome = catch_unwind(AssertUnwindSafe(|| grad(worker, local, &snap.x, &mut g)));
        let msg = match outcome {
            Ok(Ok(())) => Message::Gradient { worker, read_clock: snap.clock, g },
            Ok(Err(e)) => Message::Failed { worker, diagnostic: e.to_string() },
            Err(payload) => Message::Failed { worker, diagnostic: format!("panicked: {}", panic_text(&*payload)) },
        };
        let failed = matches!(msg, Message::Failed { .. });
        if submit.send(msg).is_err() || failed {
            return;
        }
        local += 1;
        // The server replies with the snapshot published right after this
        // worker's gradient was applied; a closed channel means the run is over.
        match replies.recv() {
            Ok(s) => snap = s,
            Err(_) => return,
        }
    }
}

/// Parameter server with `workers` threads and a custom gradient oracle
/// `grad(worker, local_iteration, x, out)`.
///
/// Workers loop over read, compute, submit. The calling thread is the single
/// applier: it takes submissions one at a time, sets `τ = t' − t` from the
/// server clock `t'` and the clock `t` of the read, applies or skips the step,
/// and publishes a new snapshot. Skipped updates do not advance the clock.
pub fn run_threaded_with<G>(
    config: &RunConfig,
    problem: &Problem,
    policy: &PolicyWrapper,
    grad: G,
) -> Result<RunTrace>
where
    G: Fn(usize, u64, &[f64], &mut [f64]) -> Result<()> + Sync,
{
    let m = config.workers;
    let mut x = problem.x0();
    let mut rec = Recorder::new(config, problem, &x);
    let (submit_tx, submit_rx) = unbounded::<Message>();
    let mut reply_txs = Vec::with_capacity(m);
    let mut reply_rxs = Vec::with_capacity(m);
    for _ in 0..m {
        let (tx, rx) = unbounded::<Arc<Snapshot>>();
        reply_txs.push(tx);
        reply_rxs.push(rx);
    }
    let initial = Snapshot::new(0, x.clone());
    let grad = &grad;

    let failure = thread::scope(|scope| {
        for (w, rx) in reply_rxs.into_iter().enumerate() {
            let tx = submit_tx.clone();
            let snap = Arc::clone(&initial);
            scope.spawn(move || worker_loop(w, snap, grad, tx, rx));
        }
        drop(submit_tx);

        let mut clock: u64 = 0;
        let mut failure = None;
        for t in 0..config.steps {
            let (worker, read_clock, g) = match submit_rx.recv() {
                Ok(Message::Gradient { worker, read_clock, g }) => (worker, read_clock, g),
                Ok(Message::Failed { worker, diagnostic }) => {
                    failure = Some(format!("worker {worker} failed at update {t}: {diagnostic}"));
                    break;
                }
                Err(_) => {
                    failure = Some(format!("all workers exited before update {t}"));
                    break;
                }
            };
            let tau = clock - read_clock;
            let alpha = policy.step(tau);
            if alpha > 0.0 {
                descend(&mut x, alpha, &g);
                clock += 1;
            }
            let stop = rec.record(t, tau, alpha, &x);
            // A worker that already left only matters if the run continues, and
            // then its absence shows up as a failure message or a closed channel.
            let _ = reply_txs[worker].send(Snapshot::new(clock, x.clone()));
            if stop {
                break;
            }
        }
        // Closing the reply channels releases every worker blocked on a read.
        reply_txs.clear();
        failure
    });

    let batch = problem.data_shape().map(|(_, b)| b);
    match failure {
        None => Ok(rec.finish(x, batch)),
        Some(diagnostic) => {
            let partial = if rec.is_empty() { None } else { Some(rec.finish(x, batch)) };
            Err(Error::Aborted { diagnostic, partial: partial.map(Box::new) })
        }
    }
}

/// Threaded parameter server on the configured problem; worker `w`'s `k`-th
/// gradient uses the sub-seed of `(seed, w, k)`.
pub fn run_async_threaded(config: &RunConfig) -> Result<RunTrace> {
    check_mode(config, Mode::AsyncThreaded)?;
    let (problem, policy) = config.prepare()?;
    let seed = config.seed;
    let p = &problem;
    run_threaded_with(config, &problem, &policy, move |w, k, x, out| {
        p.grad(x, &mut update_rng(seed, w as u64, k), out)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_detects_changes() {
        let s = Snapshot::new(3, vec![1.0, 2.0]);
        assert!(s.is_intact());
        let torn = Snapshot { clock: 3, x: vec![1.0, 2.5], checksum: s.checksum };
        assert!(!torn.is_intact());
        assert_ne!(checksum(3, &[1.0]), checksum(4, &[1.0]));
    }
}
