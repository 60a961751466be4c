//! Sharded model state: embedding tables, a flat dense parameter vector and
//! the reader cursor, plus deep-copy snapshots of all of it.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Stream reserved for the dense parameters; table `t` uses stream `t + 1`.
const DENSE_STREAM: u64 = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Row count of each table; the table id is the position in this list.
    pub rows_per_table: Vec<usize>,
    pub dim: usize,
    pub num_shards: usize,
    /// Length of the flat dense (MLP stand-in) parameter vector.
    pub dense_len: usize,
    /// Keep a per-row optimizer-proxy matrix of the same shape as the values.
    pub has_aux_state: bool,
}

impl ModelConfig {
    /// `num_tables` tables of `rows` rows each, no aux state, 64 dense params.
    pub fn uniform(num_tables: usize, rows: usize, dim: usize, num_shards: usize) -> Self {
        ModelConfig {
            rows_per_table: vec![rows; num_tables],
            dim,
            num_shards,
            dense_len: 64,
            has_aux_state: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows_per_table.is_empty() {
            return Err(Error::config("model needs at least one table"));
        }
        if self.dim == 0 {
            return Err(Error::config("embedding dim must be at least 1"));
        }
        if self.num_shards == 0 {
            return Err(Error::config("model needs at least one shard"));
        }
        if self.rows_per_table.len() > u32::MAX as usize || self.dim > u32::MAX as usize {
            return Err(Error::config("table count and dim must fit in 32 bits"));
        }
        Ok(())
    }

    pub fn num_tables(&self) -> usize {
        self.rows_per_table.len()
    }

    /// Tables are assigned to shards round-robin by table index.
    pub fn shard_of(&self, table_id: u32) -> usize {
        table_id as usize % self.num_shards
    }

    pub fn tables_of_shard(&self, shard: usize) -> impl Iterator<Item = u32> + '_ {
        (0..self.num_tables() as u32).filter(move |&t| self.shard_of(t) == shard)
    }

    pub fn total_rows(&self) -> usize {
        self.rows_per_table.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub table_id: u32,
    pub rows: usize,
    pub dim: usize,
    /// Row-major `rows x dim` matrix.
    pub values: Vec<f32>,
    pub aux: Option<Vec<f32>>,
}

impl EmbeddingTable {
    pub fn zeros(table_id: u32, rows: usize, dim: usize, with_aux: bool) -> Self {
        EmbeddingTable {
            table_id,
            rows,
            dim,
            values: vec![0.0; rows * dim],
            aux: with_aux.then(|| vec![0.0; rows * dim]),
        }
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f32] {
        &self.values[row * self.dim..(row + 1) * self.dim]
    }

    #[inline]
    pub fn row_mut(&mut self, row: usize) -> &mut [f32] {
        &mut self.values[row * self.dim..(row + 1) * self.dim]
    }

    #[inline]
    pub fn aux_row(&self, row: usize) -> Option<&[f32]> {
        let dim = self.dim;
        self.aux.as_deref().map(|a| &a[row * dim..(row + 1) * dim])
    }

    #[inline]
    pub fn aux_row_mut(&mut self, row: usize) -> Option<&mut [f32]> {
        let dim = self.dim;
        self.aux.as_deref_mut().map(|a| &mut a[row * dim..(row + 1) * dim])
    }

    /// Checks the shape invariant and that every element is finite.
    pub fn validate(&self) -> Result<()> {
        let expected = self.rows * self.dim;
        if self.values.len() != expected {
            return Err(Error::Shape { expected, found: self.values.len() });
        }
        if let Some(aux) = &self.aux {
            if aux.len() != expected {
                return Err(Error::Shape { expected, found: aux.len() });
            }
        }
        let all = self.values.iter().chain(self.aux.iter().flatten());
        if let Some(position) = all.clone().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { position });
        }
        Ok(())
    }

    /// Bitwise equality, so `-0.0 != 0.0` and NaN payloads are compared exactly.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.table_id == other.table_id
            && self.rows == other.rows
            && self.dim == other.dim
            && bits_eq(&self.values, &other.values)
            && match (&self.aux, &other.aux) {
                (Some(a), Some(b)) => bits_eq(a, b),
                (None, None) => true,
                _ => false,
            }
    }
}

pub(crate) fn bits_eq(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct ReaderState {
    /// Global count of batches handed to the trainer.
    pub batches_consumed: u64,
    /// Position of the counter-based workload stream; the next batch index.
    pub rng_cursor: u64,
}

impl ReaderState {
    pub fn at_batch(batch: u64) -> Self {
        ReaderState { batches_consumed: batch, rng_cursor: batch }
    }
}

/// Live, mutable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    config: ModelConfig,
    pub tables: Vec<EmbeddingTable>,
    pub dense: Vec<f32>,
    pub reader: ReaderState,
}

/// Deterministically initialises every element from a seeded uniform stream
/// over `[-1, 1)`. Aux state starts at zero and the reader cursor at batch 0.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let mut tables = Vec::with_capacity(config.num_tables());
    for (t, &rows) in config.rows_per_table.iter().enumerate() {
        let mut table = EmbeddingTable::zeros(t as u32, rows, config.dim, config.has_aux_state);
        let mut rng = init_stream(seed, t as u64 + 1);
        table.values.iter_mut().for_each(|v| *v = uniform_pm1(&mut rng));
        tables.push(table);
    }
    let mut rng = init_stream(seed, DENSE_STREAM);
    let dense = (0..config.dense_len).map(|_| uniform_pm1(&mut rng)).collect();
    Ok(ModelState { config, tables, dense, reader: ReaderState::default() })
}

fn init_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[inline]
fn uniform_pm1(rng: &mut ChaCha8Rng) -> f32 {
    // 24-bit mantissa draw in [0, 1); the affine map is exact in f32.
    rng.random::<f32>() * 2.0 - 1.0
}

impl ModelState {
    /// Assembles a model from already materialised parts, checking shapes.
    pub fn from_parts(
        config: ModelConfig,
        tables: Vec<EmbeddingTable>,
        dense: Vec<f32>,
        reader: ReaderState,
    ) -> Result<Self> {
        config.validate()?;
        if tables.len() != config.num_tables() {
            return Err(Error::Shape { expected: config.num_tables(), found: tables.len() });
        }
        for (t, table) in tables.iter().enumerate() {
            if table.table_id as usize != t
                || table.rows != config.rows_per_table[t]
                || table.dim != config.dim
                || table.aux.is_some() != config.has_aux_state
            {
                return Err(Error::format(format!("table {t} does not match the model config")));
            }
            table.validate()?;
        }
        if dense.len() != config.dense_len {
            return Err(Error::Shape { expected: config.dense_len, found: dense.len() });
        }
        Ok(ModelState { config, tables, dense, reader })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn table(&self, table_id: u32) -> &EmbeddingTable {
        &self.tables[table_id as usize]
    }

    pub fn table_mut(&mut self, table_id: u32) -> &mut EmbeddingTable {
        &mut self.tables[table_id as usize]
    }

    /// Deep copy of the whole state, grouped by shard. The caller must hold
    /// exclusive access for the duration (the engine's stall window).
    pub fn snapshot(&self) -> ModelSnapshot {
        let mut snap = ModelSnapshot {
            config: self.config.clone(),
            shards: Vec::new(),
            dense: Vec::new(),
            reader: self.reader,
            snapshot_batch: self.reader.batches_consumed,
        };
        self.snapshot_into(&mut snap, |shards| shards.iter_mut().for_each(|s| self.copy_shard_into(s)));
        snap
    }

    /// Overwrites `dst` with the current state, reusing its allocations.
    /// `copy_shards` must call [`copy_shard_into`](Self::copy_shard_into) on
    /// every shard it is given; it may do so concurrently.
    pub fn snapshot_into<F>(&self, dst: &mut ModelSnapshot, copy_shards: F)
    where
        F: FnOnce(&mut [ShardSnapshot]),
    {
        if dst.config != self.config {
            dst.config = self.config.clone();
        }
        dst.shards.truncate(self.config.num_shards);
        while dst.shards.len() < self.config.num_shards {
            dst.shards.push(ShardSnapshot { shard_id: dst.shards.len(), tables: Vec::new() });
        }
        dst.dense.clone_from(&self.dense);
        dst.reader = self.reader;
        dst.snapshot_batch = self.reader.batches_consumed;
        copy_shards(&mut dst.shards);
    }

    /// Copies the tables of `dst.shard_id` into `dst`.
    pub fn copy_shard_into(&self, dst: &mut ShardSnapshot) {
        let mut n = 0;
        for t in self.config.tables_of_shard(dst.shard_id) {
            let src = &self.tables[t as usize];
            match dst.tables.get_mut(n) {
                Some(table) => {
                    table.table_id = src.table_id;
                    table.rows = src.rows;
                    table.dim = src.dim;
                    table.values.clone_from(&src.values);
                    table.aux.clone_from(&src.aux);
                }
                None => dst.tables.push(src.clone()),
            }
            n += 1;
        }
        dst.tables.truncate(n);
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.reader == other.reader
            && bits_eq(&self.dense, &other.dense)
            && self.tables.len() == other.tables.len()
            && self.tables.iter().zip(&other.tables).all(|(a, b)| a.bit_eq(b))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShardSnapshot {
    pub shard_id: usize,
    pub tables: Vec<EmbeddingTable>,
}

/// Immutable copy of a [`ModelState`] taken at `snapshot_batch`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    config: ModelConfig,
    pub shards: Vec<ShardSnapshot>,
    pub dense: Vec<f32>,
    pub reader: ReaderState,
    pub snapshot_batch: u64,
}

impl ModelSnapshot {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn table(&self, table_id: u32) -> &EmbeddingTable {
        let shard = &self.shards[self.config.shard_of(table_id)];
        shard.tables.iter().find(|t| t.table_id == table_id).expect("every table lives on exactly one shard")
    }

    /// Reassembles a live model equal to the state the snapshot was taken from.
    pub fn to_model(&self) -> ModelState {
        let mut tables: Vec<EmbeddingTable> =
            self.shards.iter().flat_map(|s| s.tables.iter().cloned()).collect();
        tables.sort_by_key(|t| t.table_id);
        ModelState { config: self.config.clone(), tables, dense: self.dense.clone(), reader: self.reader }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig::uniform(1, 4, 2, 1)
    }

    #[test]
    fn snapshot_into_reuses_a_stale_snapshot() {
        let mut m = init_model(ModelConfig::uniform(3, 5, 2, 2), 1).unwrap();
        let mut stale = init_model(ModelConfig::uniform(1, 2, 2, 1), 9).unwrap().snapshot();
        m.table_mut(2).row_mut(4)[1] = 42.0;
        m.reader = ReaderState::at_batch(17);
        m.snapshot_into(&mut stale, |shards| shards.iter_mut().for_each(|s| m.copy_shard_into(s)));
        assert_eq!(stale, m.snapshot());
        assert!(stale.to_model().bit_eq(&m));
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(small(), 7).unwrap();
        let b = init_model(small(), 7).unwrap();
        assert!(a.bit_eq(&b));
        let c = init_model(small(), 8).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn rejects_invalid_config() {
        let mut cfg = small();
        cfg.rows_per_table.clear();
        assert!(matches!(init_model(cfg, 1), Err(Error::Config(_))));
        let mut cfg = small();
        cfg.dim = 0;
        assert!(matches!(init_model(cfg, 1), Err(Error::Config(_))));
        let mut cfg = small();
        cfg.num_shards = 0;
        assert!(matches!(init_model(cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn round_robin_shards() {
        let cfg = ModelConfig::uniform(2, 4, 2, 2);
        assert_eq!(cfg.shard_of(0), 0);
        assert_eq!(cfg.shard_of(1), 1);
        let snap = init_model(cfg, 7).unwrap().snapshot();
        assert_eq!(snap.shards[0].tables[0].table_id, 0);
        assert_eq!(snap.shards[1].tables[0].table_id, 1);

        let cfg = ModelConfig::uniform(7, 1, 1, 3);
        let mut seen = [0; 7];
        for s in 0..3 {
            for t in cfg.tables_of_shard(s) {
                seen[t as usize] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
    }

    #[test]
    fn init_is_uniform_on_pm1() {
        let cfg = ModelConfig::uniform(1, 10_000, 1, 1);
        let m = init_model(cfg, 7).unwrap();
        let v = &m.tables[0].values;
        let n = v.len() as f64;
        assert!(v.iter().all(|&x| (-1.0..1.0).contains(&x)));
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // U(-1,1): mean 0, variance 1/3; the sample mean has sd sqrt(1/3/n).
        let sigma = (1.0f64 / 3.0 / n).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "mean {mean}");
        assert!((var - 1.0 / 3.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn snapshot_isolated_from_mutation() {
        let mut m = init_model(ModelConfig::uniform(2, 3, 2, 2), 3).unwrap();
        let snap = m.snapshot();
        let before = snap.clone();
        for t in 0..2u32 {
            for r in 0..3 {
                for v in m.table_mut(t).row_mut(r) {
                    *v += 1.0;
                }
                assert_eq!(snap, before);
            }
        }
        m.dense[0] = 42.0;
        m.reader.batches_consumed = 9;
        assert_eq!(snap, before);
    }

    #[test]
    fn snapshot_matches_source() {
        let m = init_model(ModelConfig::uniform(3, 5, 4, 2), 11).unwrap();
        let s1 = m.snapshot();
        let s2 = m.snapshot();
        assert_eq!(s1, s2);
        assert!(s1.to_model().bit_eq(&m));
        assert_eq!(s1.snapshot_batch, m.reader.batches_consumed);
    }

    #[test]
    fn from_parts_checks_shapes() {
        let m = init_model(ModelConfig::uniform(2, 3, 2, 1), 1).unwrap();
        let mut tables = m.tables.clone();
        tables[1].values.pop();
        let err = ModelState::from_parts(m.config().clone(), tables, m.dense.clone(), m.reader);
        assert!(err.is_err());
        let mut tables = m.tables.clone();
        tables[0].values[0] = f32::NAN;
        let err = ModelState::from_parts(m.config().clone(), tables, m.dense.clone(), m.reader);
        assert!(matches!(err, Err(Error::NonFinite { .. })));
    }
}
