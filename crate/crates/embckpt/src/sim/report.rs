//! Run metrics, as CSV (one row per checkpoint trigger) and JSON (rows plus
//! a run summary).

use std::fmt::Write as _;

use embckpt_core::payload::SectionHeader;
use embckpt_core::{BitWidth, CheckpointKind, ModelConfig, ModelState};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::engine::JobReport;

/// Column order of [`MetricsReport::to_csv`].
pub const CSV_COLUMNS: [&str; 14] = [
    "interval",
    "snapshot_batch",
    "checkpoint_id",
    "status",
    "kind",
    "bitwidth",
    "rows_written",
    "row_fraction",
    "dirty_fraction",
    "payload_bytes",
    "payload_fraction",
    "live_bytes",
    "live_fraction",
    "stall_us",
];

/// Bit width column value for full-precision rows.
pub const FP32_BITS: u8 = 32;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalMetrics {
    /// Zero-based index of the interval that ended at the trigger.
    pub interval: u64,
    pub snapshot_batch: u64,
    pub checkpoint_id: Option<u64>,
    /// `committed` or `aborted`.
    pub status: String,
    pub kind: String,
    pub bitwidth: u8,
    pub rows_written: u64,
    pub row_fraction: f64,
    pub dirty_fraction: f64,
    pub payload_bytes: u64,
    pub payload_fraction: f64,
    pub live_bytes: u64,
    pub live_fraction: f64,
    pub stall_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub num_intervals: u64,
    pub checkpoints_committed: u64,
    pub checkpoints_aborted: u64,
    pub overruns: u64,
    pub resumes: u64,
    /// Sum over resumes of the mean row-wise l2 distance between the model
    /// as checkpointed and as restored.
    pub restore_l2_perturbation: f64,
    /// Size of one full-precision full checkpoint of the model.
    pub full_fp32_bytes: u64,
    pub total_payload_bytes: u64,
    /// Bytes a full-precision full checkpoint at every committed trigger
    /// would have written.
    pub baseline_payload_bytes: u64,
    pub max_live_bytes: u64,
    /// Live bytes of the baseline, which keeps a single full checkpoint.
    pub baseline_live_bytes: u64,
    pub bandwidth_reduction: f64,
    pub capacity_reduction: f64,
    pub selected_bitwidth: u8,
    pub final_bitwidth: u8,
    pub model_digest: String,
    pub application_log_digest: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub intervals: Vec<IntervalMetrics>,
    pub summary: RunSummary,
}

pub(crate) fn bits_of(b: Option<BitWidth>) -> u8 {
    b.map_or(FP32_BITS, BitWidth::bits)
}

/// Bytes of a full-precision full checkpoint: every shard object plus the
/// dense object.
pub fn full_fp32_bytes(config: &ModelConfig) -> u64 {
    let tables: u64 = config
        .rows_per_table
        .iter()
        .enumerate()
        .map(|(t, &rows)| {
            let h = SectionHeader {
                table_id: t as u32,
                row_count: rows as u64,
                dim: config.dim as u32,
                bitwidth: None,
                has_aux: config.has_aux_state,
            };
            h.section_len(CheckpointKind::Full).expect("validated model sizes") as u64
        })
        .sum();
    tables + 8 + 4 * config.dense_len as u64
}

pub(crate) fn interval_metrics(
    r: &JobReport,
    batches_per_interval: u64,
    full_bytes: u64,
    record_timings: bool,
) -> IntervalMetrics {
    let frac = |b: u64| if full_bytes == 0 { 0.0 } else { b as f64 / full_bytes as f64 };
    IntervalMetrics {
        interval: (r.snapshot_batch / batches_per_interval).saturating_sub(1),
        snapshot_batch: r.snapshot_batch,
        checkpoint_id: r.checkpoint_id,
        status: if r.error.is_none() { "committed" } else { "aborted" }.into(),
        kind: r.kind.as_str().into(),
        bitwidth: bits_of(r.bitwidth),
        rows_written: r.rows_written,
        row_fraction: r.row_fraction,
        dirty_fraction: r.dirty_fraction,
        payload_bytes: r.payload_bytes,
        payload_fraction: frac(r.payload_bytes),
        live_bytes: r.live_bytes,
        live_fraction: frac(r.live_bytes),
        stall_us: if record_timings { r.stall.as_micros() as u64 } else { 0 },
    }
}

/// Ratios and totals derived from the per-interval rows.
pub(crate) struct Totals {
    pub committed: u64,
    pub aborted: u64,
    pub total_payload: u64,
    pub baseline_payload: u64,
    pub max_live: u64,
    pub bandwidth_reduction: f64,
    pub capacity_reduction: f64,
}

pub(crate) fn totals(rows: &[IntervalMetrics], full_bytes: u64) -> Totals {
    let committed: Vec<&IntervalMetrics> = rows.iter().filter(|r| r.status == "committed").collect();
    let total_payload: u64 = committed.iter().map(|r| r.payload_bytes).sum();
    let baseline_payload = full_bytes * committed.len() as u64;
    let max_live = committed.iter().map(|r| r.live_bytes).max().unwrap_or(0);
    let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Totals {
        committed: committed.len() as u64,
        aborted: (rows.len() - committed.len()) as u64,
        total_payload,
        baseline_payload,
        max_live,
        bandwidth_reduction: ratio(baseline_payload, total_payload),
        capacity_reduction: ratio(if committed.is_empty() { 0 } else { full_bytes }, max_live),
    }
}

pub fn model_digest(model: &ModelState) -> String {
    let mut h = Sha256::new();
    for t in &model.tables {
        h.update(t.table_id.to_le_bytes());
        for v in &t.values {
            h.update(v.to_bits().to_le_bytes());
        }
        for v in t.aux.iter().flatten() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    for v in &model.dense {
        h.update(v.to_bits().to_le_bytes());
    }
    h.update(model.reader.batches_consumed.to_le_bytes());
    h.update(model.reader.rng_cursor.to_le_bytes());
    hex(&h.finalize())
}

pub(crate) fn log_digest(log: &[[u8; 32]]) -> String {
    let mut h = Sha256::new();
    for d in log {
        h.update(d);
    }
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = CSV_COLUMNS.join(",");
        out.push('\n');
        for r in &self.intervals {
            let id = r.checkpoint_id.map(|i| i.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.interval,
                r.snapshot_batch,
                id,
                r.status,
                r.kind,
                r.bitwidth,
                r.rows_written,
                r.row_fraction,
                r.dirty_fraction,
                r.payload_bytes,
                r.payload_fraction,
                r.live_bytes,
                r.live_fraction,
                r.stall_us
            );
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}
