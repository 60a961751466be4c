use embckpt_core::policy::fallback_check;
use embckpt_core::quant::mean_l2_loss;
use embckpt_core::{init_model, ModelState, Tracker};

use super::report::{
    bits_of, full_fp32_bytes, interval_metrics, log_digest, model_digest, totals, MetricsReport, RunSummary,
};
use super::workload::{Workload, WorkloadConfig};
use crate::engine::{restore, Engine, RunConfig};
use crate::error::{Error, Result};
use crate::store::CheckpointStore;

/// The trainer process dies just before training batch `offset` of interval
/// `interval` (both zero-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct FailurePoint {
    pub interval: u64,
    pub offset: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FailureSchedule {
    points: Vec<FailurePoint>,
}

impl FailureSchedule {
    pub fn new(points: Vec<FailurePoint>) -> Result<Self> {
        if points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("failure points must be strictly increasing".into()));
        }
        Ok(FailureSchedule { points })
    }

    pub fn none() -> Self {
        Self::default()
    }

    pub fn points(&self) -> &[FailurePoint] {
        &self.points
    }

    pub fn validate_for(&self, w: &WorkloadConfig) -> Result<()> {
        match self.points.iter().find(|p| p.interval >= w.num_intervals || p.offset >= w.batches_per_interval)
        {
            Some(p) => {
                Err(Error::Config(format!("failure point {}:{} lies outside the run", p.interval, p.offset)))
            }
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimOptions {
    /// Report stall times and overruns. Both depend on scheduling, so they
    /// are zero unless enabled, which keeps reports reproducible.
    pub record_timings: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: MetricsReport,
    pub model: ModelState,
    /// Digest of each batch in the surviving lineage, in training order.
    pub application_log: Vec<[u8; 32]>,
}

impl RunOutcome {
    pub fn error(&self) -> Option<&str> {
        self.report.summary.error.as_deref()
    }
}

struct Trainer {
    workload: Workload,
    cfg: RunConfig,
    store: CheckpointStore,
    model: ModelState,
    tracker: Tracker,
    engine: Engine,
    log: Vec<[u8; 32]>,
    resumes: u64,
    overruns: u64,
    perturbation: f64,
    reports: Vec<crate::engine::JobReport>,
}

pub fn run(
    workload: &WorkloadConfig,
    run_cfg: &RunConfig,
    schedule: &FailureSchedule,
    store: CheckpointStore,
) -> Result<RunOutcome> {
    run_with(workload, run_cfg, schedule, store, SimOptions::default())
}

/// Trains `workload.num_intervals` intervals, checkpointing at every
/// interval end and restoring at every scheduled failure. Configuration
/// problems are returned as errors; a failure during the run ends it early
/// and is recorded in the report's `error` field.
pub fn run_with(
    workload: &WorkloadConfig,
    run_cfg: &RunConfig,
    schedule: &FailureSchedule,
    store: CheckpointStore,
    opts: SimOptions,
) -> Result<RunOutcome> {
    run_cfg.validate()?;
    schedule.validate_for(workload)?;
    if run_cfg.checkpoint_interval != workload.batches_per_interval {
        return Err(Error::Config(format!(
            "checkpoint_interval {} differs from batches_per_interval {}",
            run_cfg.checkpoint_interval, workload.batches_per_interval
        )));
    }
    let wl = Workload::new(workload.clone())?;
    let model = init_model(workload.model.clone(), workload.seed)?;
    let tracker = Tracker::new(&workload.model);
    let engine = Engine::new(store.clone(), run_cfg.clone())?;
    let mut t = Trainer {
        workload: wl,
        cfg: run_cfg.clone(),
        store,
        model,
        tracker,
        engine,
        log: Vec::new(),
        resumes: 0,
        overruns: 0,
        perturbation: 0.0,
        reports: Vec::new(),
    };
    t.engine.reserve_snapshots(&t.model);
    let result = t.train(schedule).and_then(|()| t.finish());
    Ok(t.into_outcome(opts, result.err()))
}

impl Trainer {
    fn train(&mut self, schedule: &FailureSchedule) -> Result<()> {
        let bpi = self.workload.config().batches_per_interval;
        let total = self.workload.config().total_batches();
        let mut failures = schedule.points().iter().map(|p| p.interval * bpi + p.offset).peekable();
        loop {
            let b = self.model.reader.batches_consumed;
            if failures.next_if_eq(&b).is_some() {
                self.fail_and_restore()?;
                continue;
            }
            if b >= total {
                return Ok(());
            }
            let batch = self.workload.step(&mut self.model, &mut self.tracker)?;
            self.log.push(batch.digest());
            if (b + 1).is_multiple_of(bpi) {
                self.engine.on_interval_end(&self.model, &mut self.tracker)?;
            }
        }
    }

    fn finish(&mut self) -> Result<()> {
        self.engine.join(&mut self.tracker)?;
        Ok(())
    }

    /// Drops all in-memory state and continues from the latest valid
    /// checkpoint (or from scratch if there is none).
    fn fail_and_restore(&mut self) -> Result<()> {
        // The in-flight checkpoint finishes before the process dies.
        self.engine.join(&mut self.tracker)?;
        self.collect_engine();
        let reference = self.engine.last_committed().map(|(id, s)| (id, s.to_model()));
        self.store.cleanup_pending(&self.cfg.run_id)?;

        match restore(&self.store, &self.cfg.run_id, self.cfg.restore_fallback) {
            Ok(restored) => {
                if let Some((id, before)) = &reference {
                    if *id == restored.checkpoint_id {
                        self.perturbation += model_l2(before, &restored.model)?;
                    }
                }
                self.replace_engine(Engine::resume(self.store.clone(), self.cfg.clone(), &restored)?);
                self.model = restored.model;
                self.tracker = restored.tracker;
            }
            Err(Error::NoCheckpoint(_)) => {
                self.replace_engine(Engine::new(self.store.clone(), self.cfg.clone())?);
                let wl = self.workload.config();
                self.model = init_model(wl.model.clone(), wl.seed)?;
                self.tracker = Tracker::new(&wl.model);
            }
            Err(e) => return Err(e),
        }
        self.engine.reserve_snapshots(&self.model);
        self.resumes += 1;
        if let Some(selected) = self.cfg.selected_bitwidth() {
            self.engine.set_bitwidth(fallback_check(self.resumes, selected));
        }
        self.log.truncate(self.model.reader.batches_consumed as usize);
        Ok(())
    }

    fn collect_engine(&mut self) {
        self.reports.extend(self.engine.take_reports());
    }

    fn replace_engine(&mut self, engine: Engine) {
        let old = std::mem::replace(&mut self.engine, engine);
        self.overruns += old.overruns();
    }

    fn into_outcome(mut self, opts: SimOptions, error: Option<Error>) -> RunOutcome {
        let final_bitwidth = bits_of(self.engine.bitwidth());
        self.collect_engine();
        self.overruns += self.engine.overruns();
        let wl = self.workload.config();
        let full = full_fp32_bytes(&wl.model);
        let intervals: Vec<_> = self
            .reports
            .iter()
            .map(|r| interval_metrics(r, wl.batches_per_interval, full, opts.record_timings))
            .collect();
        let t = totals(&intervals, full);
        let summary = RunSummary {
            num_intervals: wl.num_intervals,
            checkpoints_committed: t.committed,
            checkpoints_aborted: t.aborted,
            overruns: if opts.record_timings { self.overruns } else { 0 },
            resumes: self.resumes,
            restore_l2_perturbation: self.perturbation,
            full_fp32_bytes: full,
            total_payload_bytes: t.total_payload,
            baseline_payload_bytes: t.baseline_payload,
            max_live_bytes: t.max_live,
            baseline_live_bytes: full,
            bandwidth_reduction: t.bandwidth_reduction,
            capacity_reduction: t.capacity_reduction,
            selected_bitwidth: bits_of(self.cfg.selected_bitwidth()),
            final_bitwidth,
            model_digest: model_digest(&self.model),
            application_log_digest: log_digest(&self.log),
            error: error.map(|e| e.to_string()),
        };
        RunOutcome {
            report: MetricsReport { intervals, summary },
            model: self.model,
            application_log: self.log,
        }
    }
}

/// Mean over all embedding rows of the l2 distance between two models of
/// the same shape.
pub fn model_l2(a: &ModelState, b: &ModelState) -> Result<f64> {
    let dim = a.config().dim;
    let mut sum = 0.0;
    let mut rows = 0usize;
    for (ta, tb) in a.tables.iter().zip(&b.tables) {
        sum += mean_l2_loss(&ta.values, &tb.values, dim)? * ta.rows as f64;
        rows += ta.rows;
    }
    Ok(if rows == 0 { 0.0 } else { sum / rows as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_validation() {
        let p = |interval, offset| FailurePoint { interval, offset };
        assert!(FailureSchedule::new(vec![p(1, 5), p(1, 5)]).is_err());
        assert!(FailureSchedule::new(vec![p(2, 0), p(1, 5)]).is_err());
        let s = FailureSchedule::new(vec![p(1, 5), p(2, 0)]).unwrap();
        let w = WorkloadConfig { num_intervals: 3, batches_per_interval: 10, ..WorkloadConfig::default() };
        assert!(s.validate_for(&w).is_ok());
        assert!(FailureSchedule::new(vec![p(3, 0)]).unwrap().validate_for(&w).is_err());
        assert!(FailureSchedule::new(vec![p(0, 10)]).unwrap().validate_for(&w).is_err());
    }
}
