//! Binary shard payload.
//!
//! A shard object is a sequence of table sections, all little-endian:
//!
//! ```text
//! header (24 bytes):
//!   magic "CNR1" | table_id u32 | row_count u64 | dim u32 |
//!   bitwidth u8 | mode u8 | aux_flag u8 | reserved u8
//! row_count records:
//!   [row_index u64]                      incremental checkpoints only
//!   mode 1: x_min f32 | x_max f32 | packed codes, ceil(dim*N/8) bytes
//!   mode 0: dim x f32
//!   [dim x f32 aux]                      when aux_flag = 1
//! ```
//!
//! Whether records carry a row index is a property of the checkpoint kind
//! recorded in the manifest, so the parser takes the kind as an argument.
//! Full-precision sections store bitwidth 32.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::EmbeddingTable;
use crate::policy::CheckpointKind;
use crate::quant::{
    dequantize_into, pack_codes_into, packed_len, unpack_codes, BitWidth, QuantParams, RangeMethod,
};

pub const MAGIC: [u8; 4] = *b"CNR1";
pub const HEADER_LEN: usize = 24;
const FP32_BITWIDTH: u8 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StorageMode {
    Fp32 = 0,
    Uniform = 1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SectionHeader {
    pub table_id: u32,
    pub row_count: u64,
    pub dim: u32,
    /// `None` for full-precision sections.
    pub bitwidth: Option<BitWidth>,
    pub has_aux: bool,
}

impl SectionHeader {
    pub fn mode(&self) -> StorageMode {
        match self.bitwidth {
            None => StorageMode::Fp32,
            Some(_) => StorageMode::Uniform,
        }
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.table_id.to_le_bytes());
        out.extend_from_slice(&self.row_count.to_le_bytes());
        out.extend_from_slice(&self.dim.to_le_bytes());
        out.push(self.bitwidth.map_or(FP32_BITWIDTH, BitWidth::bits));
        out.push(self.mode() as u8);
        out.push(self.has_aux as u8);
        out.push(0);
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::format("truncated section header"));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::format("bad section magic"));
        }
        let table_id = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let row_count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
        let (bits, mode, aux, reserved) = (bytes[20], bytes[21], bytes[22], bytes[23]);
        let bitwidth = match (mode, bits) {
            (0, FP32_BITWIDTH) => None,
            (1, b) => Some(BitWidth::from_bits(b).map_err(|_| Error::format(format!("bad bitwidth {b}")))?),
            _ => return Err(Error::format(format!("bad mode {mode} / bitwidth {bits}"))),
        };
        let has_aux = match aux {
            0 => false,
            1 => true,
            _ => return Err(Error::format(format!("bad aux flag {aux}"))),
        };
        if reserved != 0 {
            return Err(Error::format("reserved header byte is not zero"));
        }
        if dim == 0 {
            return Err(Error::format("section dim is zero"));
        }
        Ok(SectionHeader { table_id, row_count, dim, bitwidth, has_aux })
    }

    /// Bytes per row record.
    pub fn record_len(&self, kind: CheckpointKind) -> usize {
        let dim = self.dim as usize;
        let index = match kind {
            CheckpointKind::Incremental => 8,
            CheckpointKind::Full => 0,
        };
        let values = match self.bitwidth {
            None => dim * 4,
            Some(n) => 8 + packed_len(dim, n),
        };
        let aux = if self.has_aux { dim * 4 } else { 0 };
        index + values + aux
    }

    pub fn section_len(&self, kind: CheckpointKind) -> Option<usize> {
        (self.row_count as usize).checked_mul(self.record_len(kind))?.checked_add(HEADER_LEN)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RowValues {
    Fp32(Vec<f32>),
    Quantized { params: QuantParams, codes: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowRecord {
    pub row_index: u64,
    pub values: RowValues,
    pub aux: Option<Vec<f32>>,
}

impl RowRecord {
    /// Full-precision view of the row's values.
    pub fn decode_values(&self) -> Result<Vec<f32>> {
        match &self.values {
            RowValues::Fp32(v) => Ok(v.clone()),
            RowValues::Quantized { params, codes } => {
                let mut out = Vec::with_capacity(codes.len());
                dequantize_into(params, codes, &mut out)?;
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableSection {
    pub header: SectionHeader,
    pub rows: Vec<RowRecord>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ShardPayload {
    pub sections: Vec<TableSection>,
}

impl ShardPayload {
    pub fn serialize(&self, kind: CheckpointKind) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for section in &self.sections {
            let h = &section.header;
            if section.rows.len() as u64 != h.row_count {
                return Err(Error::Shape { expected: h.row_count as usize, found: section.rows.len() });
            }
            h.encode(&mut out);
            for (pos, row) in section.rows.iter().enumerate() {
                if kind == CheckpointKind::Full && row.row_index != pos as u64 {
                    return Err(Error::format("full sections must list rows in order"));
                }
                write_record(&mut out, h, kind, row)?;
            }
        }
        Ok(out)
    }

    pub fn parse(bytes: &[u8], kind: CheckpointKind) -> Result<Self> {
        let mut sections = Vec::new();
        let mut rest = bytes;
        while !rest.is_empty() {
            let header = SectionHeader::decode(rest)?;
            let len = header
                .section_len(kind)
                .filter(|&l| l <= rest.len())
                .ok_or_else(|| Error::format("truncated section body"))?;
            let mut body = &rest[HEADER_LEN..len];
            let mut rows = Vec::with_capacity(header.row_count as usize);
            for pos in 0..header.row_count {
                rows.push(read_record(&mut body, &header, kind, pos)?);
            }
            sections.push(TableSection { header, rows });
            rest = &rest[len..];
        }
        Ok(ShardPayload { sections })
    }
}

fn write_record(out: &mut Vec<u8>, h: &SectionHeader, kind: CheckpointKind, row: &RowRecord) -> Result<()> {
    let dim = h.dim as usize;
    if kind == CheckpointKind::Incremental {
        out.extend_from_slice(&row.row_index.to_le_bytes());
    }
    match (&row.values, h.bitwidth) {
        (RowValues::Fp32(v), None) if v.len() == dim => put_f32s(out, v),
        (RowValues::Quantized { params, codes }, Some(n)) if codes.len() == dim && params.bitwidth == n => {
            out.extend_from_slice(&params.x_min.to_le_bytes());
            out.extend_from_slice(&params.x_max.to_le_bytes());
            pack_codes_into(codes, n, out)?;
        }
        _ => return Err(Error::format("row record does not match its section header")),
    }
    match (&row.aux, h.has_aux) {
        (Some(a), true) if a.len() == dim => put_f32s(out, a),
        (None, false) => {}
        _ => return Err(Error::format("aux state does not match its section header")),
    }
    Ok(())
}

fn read_record(body: &mut &[u8], h: &SectionHeader, kind: CheckpointKind, pos: u64) -> Result<RowRecord> {
    let dim = h.dim as usize;
    let row_index = match kind {
        CheckpointKind::Incremental => u64::from_le_bytes(take(body, 8).try_into().unwrap()),
        CheckpointKind::Full => pos,
    };
    let values = match h.bitwidth {
        None => RowValues::Fp32(get_f32s(take(body, dim * 4))),
        Some(n) => {
            let x_min = f32::from_le_bytes(take(body, 4).try_into().unwrap());
            let x_max = f32::from_le_bytes(take(body, 4).try_into().unwrap());
            let params = QuantParams::new(n, x_min, x_max)?;
            let codes = unpack_codes(take(body, packed_len(dim, n)), n, dim)?;
            RowValues::Quantized { params, codes }
        }
    };
    let aux = h.has_aux.then(|| get_f32s(take(body, dim * 4)));
    Ok(RowRecord { row_index, values, aux })
}

/// Splits `n` bytes off the front; callers have already bounds-checked the body.
fn take<'a>(body: &mut &'a [u8], n: usize) -> &'a [u8] {
    let (head, tail) = body.split_at(n);
    *body = tail;
    head
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn get_f32s(bytes: &[u8]) -> Vec<f32> {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

/// How rows are encoded into a section.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RowCodec {
    Fp32,
    Uniform { bitwidth: BitWidth, method: RangeMethod },
}

impl RowCodec {
    pub fn bitwidth(&self) -> Option<BitWidth> {
        match self {
            RowCodec::Fp32 => None,
            RowCodec::Uniform { bitwidth, .. } => Some(*bitwidth),
        }
    }

    pub fn header(&self, table: &EmbeddingTable, row_count: u64) -> SectionHeader {
        SectionHeader {
            table_id: table.table_id,
            row_count,
            dim: table.dim as u32,
            bitwidth: self.bitwidth(),
            has_aux: table.aux.is_some(),
        }
    }

    /// Encodes one row of `table` as a record. Each row is encoded on its
    /// own, so any chunking of a section's rows yields the same bytes.
    pub fn encode_row(
        &self,
        table: &EmbeddingTable,
        row: u64,
        kind: CheckpointKind,
        out: &mut Vec<u8>,
    ) -> Result<()> {
        if row >= table.rows as u64 {
            return Err(Error::Bounds { index: row, len: table.rows as u64 });
        }
        let r = row as usize;
        if kind == CheckpointKind::Incremental {
            out.extend_from_slice(&row.to_le_bytes());
        }
        let values = table.row(r);
        match self {
            RowCodec::Fp32 => put_f32s(out, values),
            RowCodec::Uniform { bitwidth, method } => {
                let q = method.quantize(values, *bitwidth)?;
                out.extend_from_slice(&q.params.x_min.to_le_bytes());
                out.extend_from_slice(&q.params.x_max.to_le_bytes());
                pack_codes_into(&q.codes, *bitwidth, out)?;
            }
        }
        if let Some(aux) = table.aux_row(r) {
            put_f32s(out, aux);
        }
        Ok(())
    }
}

/// Dense parameter object: `count u64` followed by `count` f32 values.
pub fn encode_dense(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + values.len() * 4);
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    put_f32s(&mut out, values);
    out
}

pub fn decode_dense(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() < 8 {
        return Err(Error::format("truncated dense header"));
    }
    let count = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let body = &bytes[8..];
    if Some(body.len() as u64) != count.checked_mul(4) {
        return Err(Error::format("dense object length does not match its count"));
    }
    Ok(get_f32s(body))
}
