//! Per-vector lossy codecs for embedding rows.
//!
//! Uniform quantization maps each element of a row onto `2^N` evenly spaced
//! levels between a per-row `x_min` and `x_max`. The range can be chosen
//! symmetrically, asymmetrically (min/max) or by the adaptive greedy search
//! that trims outliers. The k-means family is provided for comparison; only
//! the uniform codecs are used by the checkpoint format.

mod adaptive;
mod kmeans;
mod loss;
mod pack;
mod uniform;

pub use adaptive::{adaptive_params, AdaptiveConfig};
pub use kmeans::{
    kmeans_quantize, lloyd_scalar, Codebook, Granularity, KmeansConfig, KmeansQuantized, ScalarClusters,
};
pub use loss::{l2_distance, mean_l2_loss};
pub use pack::{pack_codes, pack_codes_into, packed_len, unpack_codes};
pub use uniform::{
    dequantize, dequantize_into, quantize, reconstruction_error, uniform_params, QuantParams,
    QuantizedVector, RangeMode,
};

use crate::error::{Error, Result};

/// Supported code widths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BitWidth {
    B2,
    B3,
    B4,
    B8,
}

impl BitWidth {
    pub const ALL: [BitWidth; 4] = [BitWidth::B2, BitWidth::B3, BitWidth::B4, BitWidth::B8];

    pub const fn bits(self) -> u8 {
        match self {
            BitWidth::B2 => 2,
            BitWidth::B3 => 3,
            BitWidth::B4 => 4,
            BitWidth::B8 => 8,
        }
    }

    /// Largest code, `2^N - 1`.
    pub const fn max_code(self) -> u8 {
        ((1u16 << self.bits()) - 1) as u8
    }

    pub const fn levels(self) -> usize {
        1 << self.bits()
    }

    pub fn from_bits(bits: u8) -> Result<Self> {
        match bits {
            2 => Ok(BitWidth::B2),
            3 => Ok(BitWidth::B3),
            4 => Ok(BitWidth::B4),
            8 => Ok(BitWidth::B8),
            other => Err(Error::Config(alloc::format!("unsupported bit width {other}"))),
        }
    }
}

impl core::fmt::Display for BitWidth {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{}", self.bits())
    }
}

/// How a stored row's quantization range is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RangeMethod {
    Symmetric,
    Asymmetric,
    /// Greedy range search; `None` uses the per-bitwidth defaults, which fall
    /// back to plain asymmetric at 8 bits.
    Adaptive(Option<AdaptiveConfig>),
}

impl RangeMethod {
    pub fn params(&self, row: &[f32], bitwidth: BitWidth) -> Result<QuantParams> {
        match self {
            RangeMethod::Symmetric => uniform_params(row, bitwidth, RangeMode::Symmetric),
            RangeMethod::Asymmetric => uniform_params(row, bitwidth, RangeMode::Asymmetric),
            RangeMethod::Adaptive(Some(cfg)) => adaptive_params(row, bitwidth, cfg),
            RangeMethod::Adaptive(None) => match AdaptiveConfig::default_for(bitwidth) {
                Some(cfg) => adaptive_params(row, bitwidth, &cfg),
                None => uniform_params(row, bitwidth, RangeMode::Asymmetric),
            },
        }
    }

    pub fn quantize(&self, row: &[f32], bitwidth: BitWidth) -> Result<QuantizedVector> {
        let params = self.params(row, bitwidth)?;
        quantize(row, &params)
    }
}

pub(crate) fn check_finite(values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(position) => Err(Error::NonFinite { position }),
        None => Ok(()),
    }
}
