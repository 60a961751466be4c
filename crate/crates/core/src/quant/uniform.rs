use alloc::vec::Vec;

use super::{check_finite, BitWidth};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RangeMode {
    /// `[-max|x|, +max|x|]`
    Symmetric,
    /// `[min x, max x]`
    Asymmetric,
}

/// Per-row uniform quantization range. Scale and zero point are derived.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub bitwidth: BitWidth,
    pub x_min: f32,
    pub x_max: f32,
}

impl QuantParams {
    pub fn new(bitwidth: BitWidth, x_min: f32, x_max: f32) -> Result<Self> {
        if !x_min.is_finite() || !x_max.is_finite() {
            return Err(Error::NonFinite { position: 0 });
        }
        if x_min > x_max {
            return Err(Error::format("x_min exceeds x_max"));
        }
        Ok(QuantParams { bitwidth, x_min, x_max })
    }

    /// Step between adjacent levels, `(x_max - x_min) / (2^N - 1)`.
    #[inline]
    pub fn scale(&self) -> f64 {
        (self.x_max as f64 - self.x_min as f64) / self.bitwidth.max_code() as f64
    }

    #[inline]
    pub fn zero_point(&self) -> f64 {
        self.x_min as f64
    }

    #[inline]
    fn encode(&self, x: f32, scale: f64) -> u8 {
        if scale == 0.0 {
            return 0;
        }
        let clipped = x.clamp(self.x_min, self.x_max) as f64;
        // libm::round rounds half away from zero.
        let code = libm::round((clipped - self.zero_point()) / scale);
        code.clamp(0.0, self.bitwidth.max_code() as f64) as u8
    }

    #[inline]
    fn decode(&self, code: u8, scale: f64) -> f32 {
        (scale * code as f64 + self.zero_point()) as f32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedVector {
    pub params: QuantParams,
    /// One code per element, each `< 2^N`. See [`super::pack_codes`] for the
    /// stored form.
    pub codes: Vec<u8>,
}

pub fn uniform_params(values: &[f32], bitwidth: BitWidth, mode: RangeMode) -> Result<QuantParams> {
    if values.is_empty() {
        return Err(Error::Shape { expected: 1, found: 0 });
    }
    check_finite(values)?;
    let (lo, hi) =
        values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    match mode {
        RangeMode::Asymmetric => QuantParams::new(bitwidth, lo, hi),
        RangeMode::Symmetric => {
            let m = lo.abs().max(hi.abs());
            QuantParams::new(bitwidth, -m, m)
        }
    }
}

/// Clips each element to the range and rounds it onto the nearest level.
/// A zero-width range encodes every element as code 0.
pub fn quantize(values: &[f32], params: &QuantParams) -> Result<QuantizedVector> {
    check_finite(values)?;
    let scale = params.scale();
    let codes = values.iter().map(|&x| params.encode(x, scale)).collect();
    Ok(QuantizedVector { params: *params, codes })
}

pub fn dequantize(qv: &QuantizedVector) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(qv.codes.len());
    dequantize_into(&qv.params, &qv.codes, &mut out)?;
    Ok(out)
}

/// Appends `scale * code + zero_point` for every code to `out`.
pub fn dequantize_into(params: &QuantParams, codes: &[u8], out: &mut Vec<f32>) -> Result<()> {
    let max = params.bitwidth.max_code();
    if let Some(&bad) = codes.iter().find(|&&c| c > max) {
        return Err(Error::format(alloc::format!(
            "code {bad} does not fit in {} bits",
            params.bitwidth.bits()
        )));
    }
    let scale = params.scale();
    out.extend(codes.iter().map(|&c| params.decode(c, scale)));
    Ok(())
}

/// `||x - deq(quant(x))||_2` under `params`, accumulated in f64.
pub fn reconstruction_error(values: &[f32], params: &QuantParams) -> f64 {
    let scale = params.scale();
    let sum: f64 = values
        .iter()
        .map(|&x| {
            let d = x as f64 - params.decode(params.encode(x, scale), scale) as f64;
            d * d
        })
        .sum();
    libm::sqrt(sum)
}
