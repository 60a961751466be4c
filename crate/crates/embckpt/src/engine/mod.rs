//! Checkpoint engine.
//!
//! At each interval boundary the trainer calls [`Engine::on_interval_end`].
//! Inside that call (the stall) the engine deep-copies the model, plans the
//! checkpoint, captures and resets the tracker, and hands the snapshot to a
//! background job. Training continues while the job quantizes and writes.
//! A new trigger first waits for the previous job; if it had not finished,
//! the wait is counted as an overrun.

mod config;
mod job;
mod restore;

use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use embckpt_core::policy::{IntervalHistory, Planner};
use embckpt_core::tracker::TrackerViews;
use embckpt_core::{BitWidth, CheckpointKind, ModelSnapshot, ModelState, Tracker};

pub use config::{QuantSetting, RangeChoice, RunConfig};
pub use job::encode_shard_whole;
pub use restore::{restore, restore_checkpoint, Restored};

use crate::error::{Error, Result};
use crate::store::{CheckpointStore, ManifestDraft};
use job::{run_job, shard_rows, CommitInfo, JobSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum JobState {
    Idle = 0,
    Optimizing = 1,
    Writing = 2,
    Committed = 3,
    Aborted = 4,
}

impl JobState {
    fn from_u8(v: u8) -> Self {
        match v {
            1 => JobState::Optimizing,
            2 => JobState::Writing,
            3 => JobState::Committed,
            4 => JobState::Aborted,
            _ => JobState::Idle,
        }
    }
}

/// Outcome of one checkpoint trigger, available once its job was joined.
#[derive(Debug, Clone, PartialEq)]
pub struct JobReport {
    /// `None` if the job aborted.
    pub checkpoint_id: Option<u64>,
    pub kind: CheckpointKind,
    pub bitwidth: Option<BitWidth>,
    pub snapshot_batch: u64,
    pub rows_written: u64,
    pub row_fraction: f64,
    /// Fraction of rows touched during the interval that just closed.
    pub dirty_fraction: f64,
    pub payload_bytes: u64,
    pub live_bytes: u64,
    pub stall: Duration,
    pub gc_deleted: Vec<u64>,
    pub error: Option<String>,
}

struct InFlight {
    handle: JoinHandle<Result<CommitInfo>>,
    state: Arc<AtomicU8>,
    views: TrackerViews,
    snapshot: Arc<ModelSnapshot>,
    kind: CheckpointKind,
    bitwidth: Option<BitWidth>,
    rows_written: u64,
    row_fraction: f64,
    dirty_fraction: f64,
    stall: Duration,
}

/// Chain position: the current base and the newest committed checkpoint.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Chain {
    base: Option<u64>,
    last: Option<u64>,
}

pub struct Engine {
    store: CheckpointStore,
    cfg: RunConfig,
    planner: Planner,
    chain: Chain,
    bitwidth: Option<BitWidth>,
    in_flight: Option<InFlight>,
    overruns: u64,
    reports: Vec<JobReport>,
    last_committed: Option<(u64, Arc<ModelSnapshot>)>,
    /// Retired snapshots whose buffers later stalls overwrite.
    spares: Vec<Arc<ModelSnapshot>>,
}

impl Engine {
    /// Starts a run with no checkpoint yet; the first trigger is full.
    pub fn new(store: CheckpointStore, cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let bitwidth = cfg.selected_bitwidth();
        let planner = Planner::new(cfg.policy);
        Ok(Engine {
            store,
            cfg,
            planner,
            chain: Chain::default(),
            bitwidth,
            in_flight: None,
            overruns: 0,
            reports: Vec::new(),
            last_committed: None,
            spares: Vec::new(),
        })
    }

    /// Continues the chain a restore ended on.
    pub fn resume(store: CheckpointStore, cfg: RunConfig, restored: &Restored) -> Result<Self> {
        let mut engine = Engine::new(store, cfg)?;
        let history = IntervalHistory::from_sizes(restored.history.clone())?;
        engine.planner = Planner::resume(engine.cfg.policy, history);
        engine.chain = Chain { base: Some(restored.base_id), last: Some(restored.checkpoint_id) };
        Ok(engine)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn store(&self) -> &CheckpointStore {
        &self.store
    }

    pub fn planner(&self) -> &Planner {
        &self.planner
    }

    pub fn bitwidth(&self) -> Option<BitWidth> {
        self.bitwidth
    }

    /// Changes the width used by later checkpoints, e.g. after a fallback.
    /// Ignored when quantization is off.
    pub fn set_bitwidth(&mut self, bitwidth: BitWidth) {
        if self.bitwidth.is_some() {
            self.bitwidth = Some(bitwidth);
        }
    }

    pub fn overruns(&self) -> u64 {
        self.overruns
    }

    pub fn job_state(&self) -> JobState {
        self.in_flight.as_ref().map_or(JobState::Idle, |j| JobState::from_u8(j.state.load(Ordering::Acquire)))
    }

    /// Newest committed checkpoint of this engine and the snapshot it holds.
    pub fn last_committed(&self) -> Option<(u64, &ModelSnapshot)> {
        self.last_committed.as_ref().map(|(id, s)| (*id, s.as_ref()))
    }

    /// Reports of joined jobs, oldest first.
    pub fn take_reports(&mut self) -> Vec<JobReport> {
        std::mem::take(&mut self.reports)
    }

    /// Checkpoint trigger. Blocks while a previous job is still running.
    pub fn on_interval_end(&mut self, model: &ModelState, tracker: &mut Tracker) -> Result<()> {
        if tracker.num_tables() != model.config().num_tables() {
            return Err(Error::Precondition("tracker does not match the model".into()));
        }
        self.join(tracker)?;

        let start = Instant::now();
        let snapshot = self.take_snapshot(model);
        let plan = self.planner.plan(tracker, self.bitwidth);
        let views = tracker.capture();
        match plan.kind {
            CheckpointKind::Full => tracker.reset_baseline(),
            CheckpointKind::Incremental => tracker.reset_interval(),
        }
        let stall = start.elapsed();

        let config = model.config();
        let total_rows = config.total_rows().max(1);
        let dirty_rows: usize = views.interval.iter().map(|b| b.count()).sum();
        let row_fraction = plan.row_fraction(&config.rows_per_table);
        let shard_rows = shard_rows(&snapshot, &plan);
        let (base_id, parent_id, history) = match plan.kind {
            CheckpointKind::Full => (None, None, Vec::new()),
            CheckpointKind::Incremental => {
                let parent = match self.cfg.policy {
                    embckpt_core::PolicyKind::ConsecutiveIncrement => self.chain.last,
                    _ => self.chain.base,
                };
                let mut h = self.planner.history().sizes().to_vec();
                h.push(row_fraction);
                (self.chain.base, parent, h)
            }
        };
        let draft = ManifestDraft {
            kind: plan.kind,
            base_id,
            parent_id,
            policy: self.cfg.policy.as_str().to_owned(),
            bitwidth: plan.bitwidth,
            snapshot_batch: snapshot.snapshot_batch,
            reader: snapshot.reader,
            config: config.clone(),
            shard_rows: shard_rows.clone(),
            row_fraction,
            history,
        };
        let state = Arc::new(AtomicU8::new(JobState::Optimizing as u8));
        let spec = JobSpec {
            store: self.store.clone(),
            run_id: self.cfg.run_id.clone(),
            snapshot: Arc::clone(&snapshot),
            codec: self.cfg.codec(plan.bitwidth),
            plan: plan.clone(),
            chunk_rows: self.cfg.chunk_rows,
            workers: self.cfg.workers,
            keep_last: self.cfg.keep_last,
            draft,
            state: Arc::clone(&state),
        };
        let handle =
            thread::Builder::new().name("ckpt-job".into()).spawn(move || run_job(spec)).map_err(Error::Io)?;
        self.in_flight = Some(InFlight {
            handle,
            state,
            views,
            snapshot,
            kind: plan.kind,
            bitwidth: plan.bitwidth,
            rows_written: shard_rows.iter().sum(),
            row_fraction,
            dirty_fraction: dirty_rows as f64 / total_rows as f64,
            stall,
        });
        Ok(())
    }

    /// Allocates snapshot buffers up front so that early stalls do not pay
    /// for fresh memory. Two are enough for steady state: one held by the
    /// running job and one by the last commit recycle into the pool.
    pub fn reserve_snapshots(&mut self, model: &ModelState) {
        while self.spares.len() < 2 {
            self.spares.push(Arc::new(model.snapshot()));
        }
    }

    /// Copies the model, one thread per shard, into a spare snapshot when one
    /// is free.
    fn take_snapshot(&mut self, model: &ModelState) -> Arc<ModelSnapshot> {
        let spare = std::iter::from_fn(|| self.spares.pop()).find_map(|s| Arc::try_unwrap(s).ok());
        let Some(mut snap) = spare else {
            return Arc::new(model.snapshot());
        };
        model.snapshot_into(&mut snap, |shards| match shards {
            [one] => model.copy_shard_into(one),
            _ => std::thread::scope(|s| {
                for shard in shards {
                    s.spawn(|| model.copy_shard_into(shard));
                }
            }),
        });
        Arc::new(snap)
    }

    /// Waits for the in-flight job, if any, and applies its outcome: a commit
    /// advances the planner and chain; an abort puts the captured dirty rows
    /// back so the next checkpoint covers them.
    pub fn join(&mut self, tracker: &mut Tracker) -> Result<Option<JobReport>> {
        let Some(job) = self.in_flight.take() else {
            return Ok(None);
        };
        if !job.handle.is_finished() {
            self.overruns += 1;
        }
        let outcome = job
            .handle
            .join()
            .unwrap_or_else(|_| Err(Error::Precondition("checkpoint worker panicked".into())));
        let mut report = JobReport {
            checkpoint_id: None,
            kind: job.kind,
            bitwidth: job.bitwidth,
            snapshot_batch: job.snapshot.snapshot_batch,
            rows_written: job.rows_written,
            row_fraction: job.row_fraction,
            dirty_fraction: job.dirty_fraction,
            payload_bytes: 0,
            live_bytes: 0,
            stall: job.stall,
            gc_deleted: Vec::new(),
            error: None,
        };
        match outcome {
            Ok(info) => {
                let id = info.manifest.checkpoint_id;
                self.planner.on_committed(job.kind, job.row_fraction)?;
                self.chain.last = Some(id);
                if job.kind == CheckpointKind::Full {
                    self.chain.base = Some(id);
                }
                if let Some((_, old)) = self.last_committed.replace((id, job.snapshot)) {
                    self.spares.push(old);
                }
                report.checkpoint_id = Some(id);
                report.payload_bytes = info.manifest.total_bytes();
                report.live_bytes = info.live_bytes;
                report.gc_deleted = info.gc_deleted;
            }
            Err(e) => {
                log::warn!("checkpoint at batch {} aborted: {e}", report.snapshot_batch);
                tracker.restore_views(&job.views)?;
                self.spares.push(job.snapshot);
                report.error = Some(e.to_string());
            }
        }
        self.reports.push(report.clone());
        Ok(Some(report))
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        if let Some(job) = self.in_flight.take() {
            let _ = job.handle.join();
        }
    }
}
