//! LSB-first bit packing of quantization codes.
//!
//! Code `i` occupies bits `[i*N, (i+1)*N)` of the little-endian bit stream,
//! least significant bit first. Pad bits in the final byte are zero.

use alloc::vec::Vec;

use super::BitWidth;
use crate::error::{Error, Result};

/// `ceil(count * N / 8)`
pub const fn packed_len(count: usize, bitwidth: BitWidth) -> usize {
    (count * bitwidth.bits() as usize).div_ceil(8)
}

pub fn pack_codes(codes: &[u8], bitwidth: BitWidth) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(packed_len(codes.len(), bitwidth));
    pack_codes_into(codes, bitwidth, &mut out)?;
    Ok(out)
}

/// Appends the packed form of `codes` to `out`.
pub fn pack_codes_into(codes: &[u8], bitwidth: BitWidth, out: &mut Vec<u8>) -> Result<()> {
    let max = bitwidth.max_code();
    if let Some(&bad) = codes.iter().find(|&&c| c > max) {
        return Err(Error::format(alloc::format!("code {bad} exceeds {max}")));
    }
    if bitwidth == BitWidth::B8 {
        out.extend_from_slice(codes);
        return Ok(());
    }
    let bits = bitwidth.bits() as u32;
    let mut acc: u32 = 0;
    let mut filled = 0u32;
    for &c in codes {
        acc |= (c as u32) << filled;
        filled += bits;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    Ok(())
}

/// Inverse of [`pack_codes`]. `bytes` must be exactly `packed_len(count, N)`
/// long with zero pad bits.
pub fn unpack_codes(bytes: &[u8], bitwidth: BitWidth, count: usize) -> Result<Vec<u8>> {
    let need = packed_len(count, bitwidth);
    if bytes.len() != need {
        return Err(Error::format(alloc::format!(
            "packed codes: expected {need} bytes, found {}",
            bytes.len()
        )));
    }
    if bitwidth == BitWidth::B8 {
        return Ok(bytes.to_vec());
    }
    let bits = bitwidth.bits() as u32;
    let mask = bitwidth.max_code() as u32;
    let mut out = Vec::with_capacity(count);
    let mut acc: u32 = 0;
    let mut avail = 0u32;
    let mut next = bytes.iter();
    for _ in 0..count {
        if avail < bits {
            acc |= (*next.next().expect("length checked") as u32) << avail;
            avail += 8;
        }
        out.push((acc & mask) as u8);
        acc >>= bits;
        avail -= bits;
    }
    if acc != 0 {
        return Err(Error::format("non-zero pad bits in packed codes"));
    }
    Ok(out)
}
