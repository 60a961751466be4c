//! Seeded Zipf workload. Every batch is a pure function of the config and
//! the batch index, so a restored reader position is all replay needs.

use embckpt_core::{ModelConfig, ModelState, ReaderState, Tracker};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Zipf};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const DENSE_STREAM_TAG: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadConfig {
    pub model: ModelConfig,
    /// Row lookups per table per batch.
    pub batch_size: usize,
    pub zipf_s: f64,
    pub batches_per_interval: u64,
    pub num_intervals: u64,
    /// Standard deviation of update deltas.
    pub lr: f32,
    pub seed: u64,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            model: ModelConfig::uniform(4, 8192, 64, 2),
            batch_size: 80,
            zipf_s: 1.05,
            batches_per_interval: 100,
            num_intervals: 12,
            lr: 0.01,
            seed: 42,
        }
    }
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.zipf_s > 0.0 && self.zipf_s.is_finite()) {
            return Err(Error::Config("zipf_s must be a positive number".into()));
        }
        if self.batch_size == 0 || self.batches_per_interval == 0 {
            return Err(Error::Config("batch_size and batches_per_interval must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be a non-negative number".into()));
        }
        Ok(())
    }

    pub fn total_batches(&self) -> u64 {
        self.batches_per_interval * self.num_intervals
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableBatch {
    pub table_id: u32,
    pub rows: Vec<u64>,
    /// `rows.len() * dim` deltas, one row-sized slice per lookup.
    pub deltas: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub index: u64,
    pub tables: Vec<TableBatch>,
    pub dense: Vec<f32>,
}

impl Batch {
    /// Digest of every (table, row, delta) application in order.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.index.to_le_bytes());
        for t in &self.tables {
            h.update(t.table_id.to_le_bytes());
            for r in &t.rows {
                h.update(r.to_le_bytes());
            }
            for d in &t.deltas {
                h.update(d.to_bits().to_le_bytes());
            }
        }
        for d in &self.dense {
            h.update(d.to_bits().to_le_bytes());
        }
        h.finalize().into()
    }
}

/// Stream for one table (or the dense block) at one batch index.
fn stream(seed: u64, tag: u8, table_id: u32, batch_index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..12].copy_from_slice(&table_id.to_le_bytes());
    key[12] = tag;
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(batch_index);
    rng
}

/// Batch generator with its distributions built once.
#[derive(Debug, Clone)]
pub struct Workload {
    cfg: WorkloadConfig,
    zipf: Vec<Zipf<f64>>,
    normal: Normal<f32>,
}

impl Workload {
    pub fn new(cfg: WorkloadConfig) -> Result<Self> {
        cfg.validate()?;
        let zipf = cfg
            .model
            .rows_per_table
            .iter()
            .map(|&rows| Zipf::new(rows as f64, cfg.zipf_s))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Error::Config(format!("zipf distribution: {e}")))?;
        let normal = Normal::new(0.0, cfg.lr).map_err(|e| Error::Config(format!("lr: {e}")))?;
        Ok(Workload { cfg, zipf, normal })
    }

    pub fn config(&self) -> &WorkloadConfig {
        &self.cfg
    }

    pub fn batch(&self, index: u64) -> Batch {
        let dim = self.cfg.model.dim;
        let tables = self
            .zipf
            .iter()
            .enumerate()
            .map(|(t, zipf)| {
                let rows_in_table = self.cfg.model.rows_per_table[t] as u64;
                let mut rng = stream(self.cfg.seed, 0, t as u32, index);
                let rows: Vec<u64> = (0..self.cfg.batch_size)
                    .map(|_| (zipf.sample(&mut rng) as u64).clamp(1, rows_in_table) - 1)
                    .collect();
                let deltas = (0..rows.len() * dim).map(|_| self.normal.sample(&mut rng)).collect();
                TableBatch { table_id: t as u32, rows, deltas }
            })
            .collect();
        let mut rng = stream(self.cfg.seed, DENSE_STREAM_TAG, 0, index);
        let dense = (0..self.cfg.model.dense_len).map(|_| self.normal.sample(&mut rng)).collect();
        Batch { index, tables, dense }
    }

    /// Generates and applies the batch at the model's reader position.
    pub fn step(&self, model: &mut ModelState, tracker: &mut Tracker) -> Result<Batch> {
        let batch = self.batch(model.reader.rng_cursor);
        apply_batch(model, tracker, &batch)?;
        Ok(batch)
    }
}

/// Generates batch `index` of `cfg`.
pub fn generate_batch(cfg: &WorkloadConfig, index: u64) -> Result<Batch> {
    Ok(Workload::new(cfg.clone())?.batch(index))
}

/// `row += delta` for every lookup, aux accumulates `delta^2`, and the rows
/// are marked dirty. The batch must be the next one the reader expects.
pub fn apply_batch(model: &mut ModelState, tracker: &mut Tracker, batch: &Batch) -> Result<()> {
    if batch.index != model.reader.rng_cursor {
        return Err(Error::Precondition(format!(
            "batch {} applied at reader position {}",
            batch.index, model.reader.rng_cursor
        )));
    }
    let dim = model.config().dim;
    for tb in &batch.tables {
        let table = model.table_mut(tb.table_id);
        for (&r, delta) in tb.rows.iter().zip(tb.deltas.chunks_exact(dim)) {
            let r = r as usize;
            for (v, d) in table.row_mut(r).iter_mut().zip(delta) {
                *v += d;
            }
            if let Some(aux) = table.aux_row_mut(r) {
                for (a, d) in aux.iter_mut().zip(delta) {
                    *a += d * d;
                }
            }
        }
        tracker.mark(tb.table_id, &tb.rows)?;
    }
    for (v, d) in model.dense.iter_mut().zip(&batch.dense) {
        *v += d;
    }
    model.reader = ReaderState::at_batch(batch.index + 1);
    Ok(())
}

/// Uniform draw helper shared by the corpus generators.
pub(crate) fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
