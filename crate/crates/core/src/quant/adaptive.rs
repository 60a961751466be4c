//! Greedy range search for asymmetric quantization.
//!
//! Starting from the naive `[min, max]` range, each step tries raising
//! `x_min` or lowering `x_max` by one bin of the original range and keeps the
//! candidate with the lower reconstruction error. The walk stops once the
//! accumulated shrinkage would exceed `ratio * range`, and the best range seen
//! (including the naive one) is returned, so the result never loses to naive
//! asymmetric quantization.

use super::{reconstruction_error, uniform_params, BitWidth, QuantParams, RangeMode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveConfig {
    num_bins: u32,
    ratio: f64,
}

impl AdaptiveConfig {
    pub fn new(num_bins: u32, ratio: f64) -> Result<Self> {
        if num_bins == 0 {
            return Err(Error::config("num_bins must be at least 1"));
        }
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::config("ratio must lie in (0, 1]"));
        }
        Ok(AdaptiveConfig { num_bins, ratio })
    }

    /// 25 bins for 2 and 3 bits, 45 for 4 bits; ratio 0.5 at 2 bits and 0.2
    /// otherwise. 8-bit rows use plain asymmetric ranges, so there is no
    /// default for them.
    pub fn default_for(bitwidth: BitWidth) -> Option<Self> {
        match bitwidth {
            BitWidth::B2 => Some(AdaptiveConfig { num_bins: 25, ratio: 0.5 }),
            BitWidth::B3 => Some(AdaptiveConfig { num_bins: 25, ratio: 0.2 }),
            BitWidth::B4 => Some(AdaptiveConfig { num_bins: 45, ratio: 0.2 }),
            BitWidth::B8 => None,
        }
    }

    pub fn num_bins(&self) -> u32 {
        self.num_bins
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    /// Number of one-bin shrink steps the search may take.
    fn max_steps(&self) -> u32 {
        // k * step <= ratio * range  <=>  k <= ratio * bins; the epsilon keeps
        // ratio * bins = 12.0000000001 from losing a step to float noise.
        let by_ratio = libm::floor(self.ratio * self.num_bins as f64 + 1e-9) as u32;
        // k = bins would collapse the range to zero width.
        by_ratio.min(self.num_bins - 1)
    }
}

pub fn adaptive_params(values: &[f32], bitwidth: BitWidth, cfg: &AdaptiveConfig) -> Result<QuantParams> {
    let naive = uniform_params(values, bitwidth, RangeMode::Asymmetric)?;
    let lo0 = naive.x_min as f64;
    let hi0 = naive.x_max as f64;
    let range = hi0 - lo0;
    if range <= 0.0 {
        return Ok(naive);
    }
    let step = range / cfg.num_bins as f64;
    let at = |lo_steps: u32, hi_steps: u32| -> Option<QuantParams> {
        let lo = (lo0 + lo_steps as f64 * step) as f32;
        let hi = (hi0 - hi_steps as f64 * step) as f32;
        (lo < hi).then_some(QuantParams { bitwidth, x_min: lo, x_max: hi })
    };

    let mut best = naive;
    let mut best_err = reconstruction_error(values, &naive);
    let (mut lo_steps, mut hi_steps) = (0u32, 0u32);
    for _ in 0..cfg.max_steps() {
        let (Some(a), Some(b)) = (at(lo_steps + 1, hi_steps), at(lo_steps, hi_steps + 1)) else {
            break;
        };
        let err_a = reconstruction_error(values, &a);
        let err_b = reconstruction_error(values, &b);
        let (cur, cur_err) = if err_a <= err_b {
            lo_steps += 1;
            (a, err_a)
        } else {
            hi_steps += 1;
            (b, err_b)
        };
        if cur_err < best_err {
            best = cur;
            best_err = cur_err;
        }
    }
    Ok(best)
}
