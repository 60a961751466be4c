//! Per-table modified-row bitsets.
//!
//! Each table carries two bitmaps: the *interval* scope (rows touched since
//! the last checkpoint) and the *since-baseline* scope (rows touched since the
//! last full checkpoint). Marking sets both, so the interval scope is always a
//! subset of the since-baseline scope.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::ModelConfig;

const WORD_BITS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scope {
    Interval,
    SinceBaseline,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirtyBitmap {
    table_id: u32,
    len: usize,
    scope: Scope,
    words: Vec<u64>,
}

impl DirtyBitmap {
    pub fn new(table_id: u32, rows: usize, scope: Scope) -> Self {
        DirtyBitmap { table_id, len: rows, scope, words: vec![0; rows.div_ceil(WORD_BITS)] }
    }

    pub fn table_id(&self) -> u32 {
        self.table_id
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    /// Sets the bit of every listed row. Nothing is modified if any index is
    /// out of range.
    pub fn mark(&mut self, indices: &[u64]) -> Result<()> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len as u64) {
            return Err(Error::Bounds { index: bad, len: self.len as u64 });
        }
        for &i in indices {
            let i = i as usize;
            self.words[i / WORD_BITS] |= 1 << (i % WORD_BITS);
        }
        Ok(())
    }

    pub fn is_set(&self, row: usize) -> bool {
        row < self.len && self.words[row / WORD_BITS] & (1 << (row % WORD_BITS)) != 0
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Bitwise OR into a fresh bitmap carrying `self`'s scope.
    pub fn merge_or(&self, other: &DirtyBitmap) -> Result<DirtyBitmap> {
        let mut out = self.clone();
        out.or_assign(other)?;
        Ok(out)
    }

    pub fn or_assign(&mut self, other: &DirtyBitmap) -> Result<()> {
        if self.table_id != other.table_id || self.len != other.len {
            return Err(Error::Shape { expected: self.len, found: other.len });
        }
        self.words.iter_mut().zip(&other.words).for_each(|(a, b)| *a |= b);
        Ok(())
    }

    pub fn clear(&mut self) {
        self.words.iter_mut().for_each(|w| *w = 0);
    }

    /// Set rows in increasing order, plus the dirty fraction `count / len`.
    pub fn dirty_rows(&self) -> (Vec<u64>, f64) {
        let mut rows = Vec::with_capacity(self.count());
        for (wi, &word) in self.words.iter().enumerate() {
            let mut w = word;
            while w != 0 {
                let bit = w.trailing_zeros() as usize;
                rows.push((wi * WORD_BITS + bit) as u64);
                w &= w - 1;
            }
        }
        let fraction = if self.len == 0 { 0.0 } else { rows.len() as f64 / self.len as f64 };
        (rows, fraction)
    }

    pub fn fraction(&self) -> f64 {
        if self.len == 0 {
            0.0
        } else {
            self.count() as f64 / self.len as f64
        }
    }

    /// Bytes held by the bitset words.
    pub fn footprint_bytes(&self) -> usize {
        self.words.len() * core::mem::size_of::<u64>()
    }
}

/// Copy of both scopes for every table, taken during the stall window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackerViews {
    pub interval: Vec<DirtyBitmap>,
    pub since_baseline: Vec<DirtyBitmap>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tracker {
    interval: Vec<DirtyBitmap>,
    since_baseline: Vec<DirtyBitmap>,
}

impl Tracker {
    pub fn new(config: &ModelConfig) -> Self {
        let make = |scope| {
            config
                .rows_per_table
                .iter()
                .enumerate()
                .map(|(t, &rows)| DirtyBitmap::new(t as u32, rows, scope))
                .collect()
        };
        Tracker { interval: make(Scope::Interval), since_baseline: make(Scope::SinceBaseline) }
    }

    pub fn num_tables(&self) -> usize {
        self.interval.len()
    }

    /// Marks rows accessed by a batch in both scopes.
    pub fn mark(&mut self, table_id: u32, indices: &[u64]) -> Result<()> {
        let t = table_id as usize;
        if t >= self.interval.len() {
            return Err(Error::Bounds { index: table_id as u64, len: self.interval.len() as u64 });
        }
        self.interval[t].mark(indices)?;
        self.since_baseline[t].mark(indices)
    }

    pub fn interval(&self, table_id: u32) -> &DirtyBitmap {
        &self.interval[table_id as usize]
    }

    pub fn since_baseline(&self, table_id: u32) -> &DirtyBitmap {
        &self.since_baseline[table_id as usize]
    }

    pub fn scope(&self, scope: Scope) -> &[DirtyBitmap] {
        match scope {
            Scope::Interval => &self.interval,
            Scope::SinceBaseline => &self.since_baseline,
        }
    }

    /// Direct access to one scope's bitmap, for rebuilding state on restore.
    pub fn bitmap_mut(&mut self, scope: Scope, table_id: u32) -> &mut DirtyBitmap {
        match scope {
            Scope::Interval => &mut self.interval[table_id as usize],
            Scope::SinceBaseline => &mut self.since_baseline[table_id as usize],
        }
    }

    /// Closes an interval: folds the interval scope into since-baseline and
    /// clears it.
    pub fn reset_interval(&mut self) {
        for (base, int) in self.since_baseline.iter_mut().zip(&mut self.interval) {
            base.or_assign(int).expect("scopes share table shapes");
            int.clear();
        }
    }

    /// A full checkpoint defines a new baseline: both scopes become empty.
    pub fn reset_baseline(&mut self) {
        self.interval.iter_mut().chain(&mut self.since_baseline).for_each(DirtyBitmap::clear);
    }

    pub fn capture(&self) -> TrackerViews {
        TrackerViews { interval: self.interval.clone(), since_baseline: self.since_baseline.clone() }
    }

    /// ORs previously captured views back in, undoing a reset whose checkpoint
    /// never committed.
    pub fn restore_views(&mut self, views: &TrackerViews) -> Result<()> {
        for (dst, src) in self.interval.iter_mut().zip(&views.interval) {
            dst.or_assign(src)?;
        }
        for (dst, src) in self.since_baseline.iter_mut().zip(&views.since_baseline) {
            dst.or_assign(src)?;
        }
        // A captured interval row must also stay in since-baseline.
        for (dst, src) in self.since_baseline.iter_mut().zip(&views.interval) {
            dst.or_assign(src)?;
        }
        Ok(())
    }

    pub fn footprint_bytes(&self) -> usize {
        self.interval.iter().chain(&self.since_baseline).map(DirtyBitmap::footprint_bytes).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bm(rows: usize, set: &[u64]) -> DirtyBitmap {
        let mut b = DirtyBitmap::new(0, rows, Scope::Interval);
        b.mark(set).unwrap();
        b
    }

    #[test]
    fn mark_is_idempotent() {
        let b = bm(8, &[3, 3, 7]);
        assert_eq!(b.count(), 2);
        assert_eq!(b.dirty_rows().0, vec![3, 7]);
    }

    #[test]
    fn mark_empty_is_noop() {
        let mut b = bm(8, &[1]);
        let before = b.clone();
        b.mark(&[]).unwrap();
        assert_eq!(b, before);
    }

    #[test]
    fn mark_all_saturates() {
        let all: Vec<u64> = (0..130).collect();
        let b = bm(130, &all);
        assert_eq!(b.fraction(), 1.0);
    }

    #[test]
    fn mark_out_of_range_rejected_atomically() {
        let mut b = bm(8, &[]);
        assert_eq!(b.mark(&[1, 8]), Err(Error::Bounds { index: 8, len: 8 }));
        assert_eq!(b.count(), 0);
    }

    #[test]
    fn merge_or_cases() {
        let a = bm(8, &[1, 2]);
        let b = bm(8, &[2, 3]);
        assert_eq!(a.merge_or(&b).unwrap().dirty_rows().0, vec![1, 2, 3]);
        assert_eq!(a.merge_or(&bm(8, &[])).unwrap(), a);
        assert_eq!(a.merge_or(&a).unwrap(), a);
        assert_eq!(a.dirty_rows().0, vec![1, 2]);
        assert!(matches!(a.merge_or(&bm(9, &[])), Err(Error::Shape { .. })));
    }

    #[test]
    fn dirty_rows_sorted_with_fraction() {
        assert_eq!(bm(8, &[5, 1]).dirty_rows(), (vec![1, 5], 0.25));
        assert_eq!(bm(8, &[]).dirty_rows(), (vec![], 0.0));
    }

    fn tracker(rows: usize) -> Tracker {
        Tracker::new(&ModelConfig::uniform(1, rows, 4, 1))
    }

    #[test]
    fn reset_interval_folds_into_baseline() {
        let mut t = tracker(8);
        t.bitmap_mut(Scope::Interval, 0).mark(&[1]).unwrap();
        t.bitmap_mut(Scope::SinceBaseline, 0).mark(&[2]).unwrap();
        t.reset_interval();
        assert_eq!(t.interval(0).count(), 0);
        assert_eq!(t.since_baseline(0).dirty_rows().0, vec![1, 2]);
        let before = t.clone();
        t.reset_interval();
        assert_eq!(t, before);
        t.reset_baseline();
        assert_eq!(t.interval(0).count() + t.since_baseline(0).count(), 0);
    }

    #[test]
    fn restore_views_undoes_reset() {
        let mut t = tracker(16);
        t.mark(0, &[1, 4]).unwrap();
        let views = t.capture();
        t.reset_baseline();
        t.mark(0, &[9]).unwrap();
        t.restore_views(&views).unwrap();
        assert_eq!(t.interval(0).dirty_rows().0, vec![1, 4, 9]);
        assert_eq!(t.since_baseline(0).dirty_rows().0, vec![1, 4, 9]);
    }

    #[test]
    fn footprint_is_one_bit_per_row() {
        let rows = 1 << 16;
        let dim = 64;
        let t = tracker(rows);
        let per_scope = t.interval(0).footprint_bytes();
        assert_eq!(per_scope, rows / 8);
        let model_bytes = rows * dim * 4;
        assert!((per_scope as f64) / (model_bytes as f64) < 0.0005);
    }

    proptest! {
        #[test]
        fn interval_subset_of_baseline(
            ops in proptest::collection::vec(
                prop_oneof![
                    proptest::collection::vec(0u64..200, 0..20).prop_map(Some),
                    Just(None)
                ],
                1..30,
            )
        ) {
            let mut t = tracker(200);
            for op in ops {
                match op {
                    Some(rows) => t.mark(0, &rows).unwrap(),
                    None => t.reset_interval(),
                }
                let (int, _) = t.interval(0).dirty_rows();
                prop_assert!(int.iter().all(|&r| t.since_baseline(0).is_set(r as usize)));
            }
        }

        #[test]
        fn dirty_rows_matches_set(rows in proptest::collection::btree_set(0u64..500, 0..100)) {
            let list: Vec<u64> = rows.iter().copied().collect();
            let b = bm(500, &list);
            let (got, frac) = b.dirty_rows();
            prop_assert_eq!(&got, &list);
            prop_assert!((frac - list.len() as f64 / 500.0).abs() < 1e-12);
        }
    }
}
