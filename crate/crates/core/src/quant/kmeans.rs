//! Non-uniform (codebook) quantization with scalar k-means.
//!
//! Elements of a *unit* (one vector, or a block of vectors) are clustered into
//! `2^N` centroids with Lloyd's algorithm; each element is then stored as the
//! index of its centroid.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_finite, BitWidth};
use crate::error::{Error, Result};

/// Stream used for the vector-level clustering of `ClusteredBlocks`.
const GROUPING_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    PerVector,
    ContiguousBlocks,
    /// Vectors are first grouped by Euclidean k-means, then each group gets
    /// one scalar codebook.
    ClusteredBlocks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KmeansConfig {
    pub bitwidth: BitWidth,
    pub granularity: Granularity,
    /// Ignored for `PerVector`.
    pub num_blocks: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl KmeansConfig {
    pub fn per_vector(bitwidth: BitWidth, seed: u64) -> Self {
        KmeansConfig { bitwidth, granularity: Granularity::PerVector, num_blocks: 1, iterations: 15, seed }
    }

    pub fn blocks(bitwidth: BitWidth, granularity: Granularity, num_blocks: usize, seed: u64) -> Self {
        KmeansConfig { bitwidth, granularity, num_blocks, iterations: 15, seed }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// Exactly `2^N` entries.
    pub centroids: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansQuantized {
    pub dim: usize,
    pub codebooks: Vec<Codebook>,
    /// Codebook index for each row.
    pub unit_of_row: Vec<usize>,
    /// Row-major codes, one per element.
    pub codes: Vec<u8>,
}

impl KmeansQuantized {
    pub fn dequantize(&self) -> Vec<f32> {
        self.codes
            .chunks_exact(self.dim)
            .zip(&self.unit_of_row)
            .flat_map(|(codes, &u)| {
                let book = &self.codebooks[u].centroids;
                codes.iter().map(move |&c| book[c as usize])
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarClusters {
    /// `k` centroids in ascending order (padded with duplicates when the input
    /// has fewer than `k` distinct values).
    pub centroids: Vec<f32>,
    pub codes: Vec<u8>,
    /// Within-cluster sum of squared errors after each assignment step.
    pub sse_trace: Vec<f64>,
}

/// Lloyd's algorithm on scalars with `k <= 256` clusters. Centroids start at a
/// uniform sample (without replacement) of the distinct input values.
pub fn lloyd_scalar(values: &[f32], k: usize, iterations: usize, rng: &mut impl Rng) -> ScalarClusters {
    assert!((1..=256).contains(&k), "cluster count must be in 1..=256");
    let mut distinct = values.to_vec();
    distinct.sort_by(f32::total_cmp);
    distinct.dedup();

    if distinct.len() <= k {
        let codes = values.iter().map(|v| distinct.partition_point(|d| d < v) as u8).collect();
        let pad = distinct.last().copied().unwrap_or(0.0);
        distinct.resize(k, pad);
        return ScalarClusters { centroids: distinct, codes, sse_trace: vec![0.0] };
    }

    let mut centroids: Vec<f32> =
        rand::seq::index::sample(rng, distinct.len(), k).iter().map(|i| distinct[i]).collect();
    centroids.sort_by(f32::total_cmp);

    let mut codes = vec![0u8; values.len()];
    let mut sse_trace = Vec::with_capacity(iterations + 1);
    let mut sums = vec![0.0f64; k];
    let mut counts = vec![0usize; k];
    for iter in 0..=iterations {
        let mut changed = false;
        let mut sse = 0.0;
        for (code, &v) in codes.iter_mut().zip(values) {
            let c = nearest(&centroids, v);
            changed |= *code as usize != c || iter == 0;
            *code = c as u8;
            let d = v as f64 - centroids[c] as f64;
            sse += d * d;
        }
        sse_trace.push(sse);
        if iter == iterations || !changed {
            break;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        counts.iter_mut().for_each(|c| *c = 0);
        for (&code, &v) in codes.iter().zip(values) {
            sums[code as usize] += v as f64;
            counts[code as usize] += 1;
        }
        for ((c, &s), &n) in centroids.iter_mut().zip(&sums).zip(&counts) {
            if n > 0 {
                *c = (s / n as f64) as f32;
            }
        }
        // Keep the sorted order `nearest` relies on; codes are recomputed on
        // the next pass.
        centroids.sort_by(f32::total_cmp);
    }
    ScalarClusters { centroids, codes, sse_trace }
}

/// Index of the centroid closest to `v` in a sorted slice, lowest index on ties.
#[inline]
fn nearest(sorted: &[f32], v: f32) -> usize {
    let i = sorted.partition_point(|&c| c < v);
    if i == 0 {
        return 0;
    }
    if i == sorted.len() {
        return i - 1;
    }
    let below = v as f64 - sorted[i - 1] as f64;
    let above = sorted[i] as f64 - v as f64;
    if below <= above {
        i - 1
    } else {
        i
    }
}

fn unit_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Quantizes a row-major `rows x dim` matrix with k-means codebooks at the
/// configured granularity.
pub fn kmeans_quantize(matrix: &[f32], dim: usize, cfg: &KmeansConfig) -> Result<KmeansQuantized> {
    if dim == 0 || !matrix.len().is_multiple_of(dim) {
        return Err(Error::Shape { expected: dim, found: matrix.len() });
    }
    if cfg.iterations == 0 {
        return Err(Error::config("k-means needs at least one iteration"));
    }
    check_finite(matrix)?;
    let rows = matrix.len() / dim;
    if cfg.granularity != Granularity::PerVector && !(1..=rows).contains(&cfg.num_blocks) {
        return Err(Error::config("num_blocks must lie in 1..=rows"));
    }

    let unit_of_row: Vec<usize> = match cfg.granularity {
        Granularity::PerVector => (0..rows).collect(),
        Granularity::ContiguousBlocks => (0..rows).map(|r| r * cfg.num_blocks / rows).collect(),
        Granularity::ClusteredBlocks => group_vectors(matrix, dim, cfg),
    };
    let num_units = unit_of_row.iter().copied().max().map_or(0, |m| m + 1);

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_units];
    for (r, &u) in unit_of_row.iter().enumerate() {
        members[u].push(r);
    }

    let k = cfg.bitwidth.levels();
    let mut codebooks = Vec::with_capacity(num_units);
    let mut codes = vec![0u8; matrix.len()];
    let mut scratch = Vec::new();
    for (u, rows_in_unit) in members.iter().enumerate() {
        scratch.clear();
        for &r in rows_in_unit {
            scratch.extend_from_slice(&matrix[r * dim..(r + 1) * dim]);
        }
        let clusters = if scratch.is_empty() {
            ScalarClusters { centroids: vec![0.0; k], codes: Vec::new(), sse_trace: vec![0.0] }
        } else {
            lloyd_scalar(&scratch, k, cfg.iterations, &mut unit_rng(cfg.seed, u as u64))
        };
        for (i, &r) in rows_in_unit.iter().enumerate() {
            codes[r * dim..(r + 1) * dim].copy_from_slice(&clusters.codes[i * dim..(i + 1) * dim]);
        }
        codebooks.push(Codebook { centroids: clusters.centroids });
    }
    Ok(KmeansQuantized { dim, codebooks, unit_of_row, codes })
}

/// Euclidean k-means over whole rows into `num_blocks` groups. Empty groups
/// are dropped and the remaining ids compacted.
fn group_vectors(matrix: &[f32], dim: usize, cfg: &KmeansConfig) -> Vec<usize> {
    let rows = matrix.len() / dim;
    let k = cfg.num_blocks;
    let mut rng = unit_rng(cfg.seed, GROUPING_STREAM);
    let row = |r: usize| &matrix[r * dim..(r + 1) * dim];
    let mut centers: Vec<f64> = rand::seq::index::sample(&mut rng, rows, k)
        .iter()
        .flat_map(|r| row(r).iter().map(|&v| v as f64))
        .collect();

    let mut assign = vec![usize::MAX; rows];
    for _ in 0..cfg.iterations {
        let mut changed = false;
        for (r, a) in assign.iter_mut().enumerate() {
            let x = row(r);
            let mut best = (f64::INFINITY, 0);
            for (c, center) in centers.chunks_exact(dim).enumerate() {
                let d: f64 = x
                    .iter()
                    .zip(center)
                    .map(|(&v, &m)| {
                        let d = v as f64 - m;
                        d * d
                    })
                    .sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            changed |= *a != best.1;
            *a = best.1;
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (r, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(row(r)) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centers[c * dim + j] = sums[c * dim + j] / counts[c] as f64;
                }
            }
        }
    }

    let mut remap = vec![usize::MAX; k];
    let mut next = 0;
    assign
        .into_iter()
        .map(|a| {
            if remap[a] == usize::MAX {
                remap[a] = next;
                next += 1;
            }
            remap[a]
        })
        .collect()
}
