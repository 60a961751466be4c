//! Vector corpora and the codec benchmark behind `quant-bench`.
//!
//! Each vector is drawn from its own counter-based stream, so a corpus of
//! `n` vectors is a prefix of any larger corpus with the same seed.

use embckpt_core::quant::{
    dequantize, kmeans_quantize, mean_l2_loss, Granularity, KmeansConfig, RangeMethod,
};
use embckpt_core::BitWidth;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::Serialize;

use super::workload::uniform;
use crate::error::Result;

fn vector_stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn exp1(rng: &mut impl Rng) -> f64 {
    Exp1.sample(rng)
}

fn log_uniform(rng: &mut impl Rng, lo_exp: f64, hi_exp: f64) -> f64 {
    10f64.powf(uniform(rng, lo_exp, hi_exp))
}

/// Gaussian, uniform, exponential, outlier-contaminated and constant
/// vectors with magnitudes spread over many orders.
pub fn mixed_corpus(count: usize, dim: usize, seed: u64) -> Vec<f32> {
    let mut out = Vec::with_capacity(count * dim);
    for i in 0..count {
        let mut rng = vector_stream(seed, i as u64);
        let scale = log_uniform(&mut rng, -4.0, 3.0);
        let center = scale * uniform(&mut rng, -3.0, 3.0);
        let kind = rng.random_range(0..20u32);
        let start = out.len();
        for _ in 0..dim {
            let v = match kind {
                0 => center,
                1..=6 => center + scale * normal(&mut rng),
                7..=10 => center + scale * uniform(&mut rng, -1.0, 1.0),
                11..=14 => center + scale * exp1(&mut rng),
                _ => scale * normal(&mut rng),
            };
            out.push(v as f32);
        }
        if kind >= 15 {
            let outliers = rng.random_range(1..=4);
            for _ in 0..outliers {
                let pos = start + rng.random_range(0..dim);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                out[pos] = (sign * scale * uniform(&mut rng, 10.0, 100.0)) as f32;
            }
        }
    }
    out
}

/// Vectors whose values sit on one side of a random offset with a long
/// tail, so their range is far from symmetric around zero.
pub fn skewed_corpus(count: usize, dim: usize, seed: u64) -> Vec<f32> {
    let mut out = Vec::with_capacity(count * dim);
    for i in 0..count {
        let mut rng = vector_stream(seed, i as u64);
        let scale = log_uniform(&mut rng, -2.0, 0.5);
        let offset = uniform(&mut rng, -1.0, 1.0);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        for _ in 0..dim {
            out.push((offset + sign * scale * exp1(&mut rng)) as f32);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Codec {
    Symmetric,
    Asymmetric,
    Adaptive,
    KmeansPerVector,
    KmeansContiguous,
    KmeansClustered,
}

impl Codec {
    pub const ALL: [Codec; 6] = [
        Codec::Symmetric,
        Codec::Asymmetric,
        Codec::Adaptive,
        Codec::KmeansPerVector,
        Codec::KmeansContiguous,
        Codec::KmeansClustered,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Codec::Symmetric => "symmetric",
            Codec::Asymmetric => "asymmetric",
            Codec::Adaptive => "adaptive",
            Codec::KmeansPerVector => "kmeans_per_vector",
            Codec::KmeansContiguous => "kmeans_contiguous",
            Codec::KmeansClustered => "kmeans_clustered",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub codec: Codec,
    pub bitwidth: u8,
    pub mean_l2: f64,
}

/// Reconstruction of `matrix` (row-major, `dim` columns) through `codec`.
pub fn reconstruct(
    matrix: &[f32],
    dim: usize,
    codec: Codec,
    bitwidth: BitWidth,
    num_blocks: usize,
    seed: u64,
) -> Result<Vec<f32>> {
    let uniform_with = |method: RangeMethod| -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(matrix.len());
        for row in matrix.chunks_exact(dim) {
            out.extend(dequantize(&method.quantize(row, bitwidth)?)?);
        }
        Ok(out)
    };
    let kmeans_with =
        |cfg: KmeansConfig| -> Result<Vec<f32>> { Ok(kmeans_quantize(matrix, dim, &cfg)?.dequantize()) };
    match codec {
        Codec::Symmetric => uniform_with(RangeMethod::Symmetric),
        Codec::Asymmetric => uniform_with(RangeMethod::Asymmetric),
        Codec::Adaptive => uniform_with(RangeMethod::Adaptive(None)),
        Codec::KmeansPerVector => kmeans_with(KmeansConfig::per_vector(bitwidth, seed)),
        Codec::KmeansContiguous => {
            kmeans_with(KmeansConfig::blocks(bitwidth, Granularity::ContiguousBlocks, num_blocks, seed))
        }
        Codec::KmeansClustered => {
            kmeans_with(KmeansConfig::blocks(bitwidth, Granularity::ClusteredBlocks, num_blocks, seed))
        }
    }
}

/// Mean l2 loss of every codec at every bit width.
pub fn quant_bench(matrix: &[f32], dim: usize, num_blocks: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for codec in Codec::ALL {
        for n in BitWidth::ALL {
            let recon = reconstruct(matrix, dim, codec, n, num_blocks, seed)?;
            rows.push(BenchRow { codec, bitwidth: n.bits(), mean_l2: mean_l2_loss(matrix, &recon, dim)? });
        }
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("codec,bitwidth,mean_l2\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.codec.as_str(), r.bitwidth, r.mean_l2));
    }
    out
}
