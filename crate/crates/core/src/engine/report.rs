use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Mode, RunConfig, RunTrace};
use crate::analysis::MomentumEstimate;
use crate::distributions::StalenessHistogram;
use crate::error::{Error, Result};

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunTrace {
    /// `step,tau,alpha,loss,dist2`; loss and dist2 are empty off-stride.
    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "tau", "alpha", "loss", "dist2"])?;
        for r in &self.records {
            out.write_record([r.step.to_string(), r.tau.to_string(), r.alpha.to_string(), opt(r.loss), opt(r.dist2)])?;
        }
        out.flush()?;
        Ok(())
    }

    /// One row per iterate `x_0, x_1, ...`, columns `x0..x{d-1}`.
    pub fn write_iterates_csv<W: Write>(&self, w: W) -> Result<()> {
        let iterates = self
            .iterates
            .as_ref()
            .ok_or_else(|| Error::Input("the run did not record iterates".into()))?;
        write_iterates_csv(iterates, w)
    }
}

pub fn write_iterates_csv<W: Write>(iterates: &[Vec<f64>], w: W) -> Result<()> {
    let d = iterates.first().map_or(0, Vec::len);
    let mut out = csv::Writer::from_writer(w);
    out.write_record((0..d).map(|j| format!("x{j}")))?;
    for x in iterates {
        out.write_record(x.iter().map(f64::to_string))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_iterates_csv<R: Read>(r: R) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let d = rdr.headers()?.len();
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != d {
            return Err(Error::Input(format!("iterates row {} has {} columns, expected {d}", line + 2, rec.len())));
        }
        let x = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| Error::Input(format!("iterates row {}: bad number '{f}'", line + 2))))
            .collect::<Result<Vec<_>>>()?;
        out.push(x);
    }
    if out.is_empty() {
        return Err(Error::Input("iterates file has no rows".into()));
    }
    Ok(out)
}

/// Run metadata: the effective config followed by what the run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub mode: Mode,
    pub updates: u64,
    pub skipped: u64,
    pub clamped: u64,
    pub final_loss: Option<f64>,
    pub final_dist2: Option<f64>,
    pub staleness_mean: f64,
    pub staleness_mode: u64,
    pub histogram: StalenessHistogram,
    pub effective_batch: Option<usize>,
    /// `⌈n/b⌉` with `b` the effective batch.
    pub updates_per_epoch: Option<u64>,
    pub updates_to_threshold: Option<u64>,
    pub epochs_to_threshold: Option<f64>,
    pub stopped_early: bool,
    pub wall_time_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub momentum: Option<MomentumEstimate>,
}

impl RunSummary {
    pub fn new(config: &RunConfig, trace: &RunTrace) -> Result<Self> {
        let problem = config.problem.build()?;
        let updates_per_epoch = match (problem.data_shape(), trace.effective_batch) {
            (Some((n, _)), Some(b)) => Some(n.div_ceil(b) as u64),
            (Some(_), None) => problem.updates_per_epoch(),
            (None, _) => None,
        };
        Ok(RunSummary {
            config: config.clone(),
            mode: trace.mode,
            updates: trace.records.len() as u64,
            skipped: trace.skipped,
            clamped: trace.clamped,
            final_loss: trace.final_loss(),
            final_dist2: trace.final_dist2(),
            staleness_mean: trace.histogram.mean(),
            staleness_mode: trace.histogram.mode(),
            histogram: trace.histogram.clone(),
            effective_batch: trace.effective_batch,
            updates_per_epoch,
            updates_to_threshold: trace.updates_to_threshold,
            epochs_to_threshold: trace.updates_to_threshold.zip(updates_per_epoch).map(|(u, e)| u as f64 / e as f64),
            stopped_early: trace.stopped_early,
            wall_time_s: trace.wall_time_s,
            momentum: None,
        })
    }
}
