use embckpt_core::{BitWidth, CheckpointKind, ModelConfig, ReaderState};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

/// Commit record of one checkpoint. Writing it is the commit point: objects
/// without a manifest are not part of any checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub run_id: String,
    pub checkpoint_id: u64,
    #[serde(with = "kind_str")]
    pub kind: CheckpointKind,
    /// Full checkpoint the chain starts from; absent for a full checkpoint.
    pub base_id: Option<u64>,
    /// Checkpoint this one applies on top of. `None` for a full checkpoint.
    pub parent_id: Option<u64>,
    pub policy: String,
    /// `None` when rows are stored in full precision.
    pub bitwidth: Option<u8>,
    pub snapshot_batch: u64,
    pub reader_batches_consumed: u64,
    pub reader_rng_cursor: u64,
    pub num_shards: usize,
    pub dim: usize,
    pub dense_len: usize,
    pub has_aux: bool,
    pub tables: Vec<TableEntry>,
    pub shards: Vec<ShardEntry>,
    pub dense: ObjectEntry,
    /// Fraction of all rows this checkpoint stores.
    pub row_fraction: f64,
    /// Row fractions of the increments since the base, including this one.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableEntry {
    pub table_id: u32,
    pub rows: usize,
    pub shard_id: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    pub shard_id: usize,
    pub rows: u64,
    pub objects: Vec<ObjectEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub key: String,
    pub bytes: u64,
    pub crc32c: u32,
}

mod kind_str {
    use embckpt_core::CheckpointKind;
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(k: &CheckpointKind, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(k.as_str())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<CheckpointKind, D::Error> {
        match String::deserialize(d)?.as_str() {
            "full" => Ok(CheckpointKind::Full),
            "incremental" => Ok(CheckpointKind::Incremental),
            other => Err(de::Error::custom(format!("unknown checkpoint kind `{other}`"))),
        }
    }
}

impl CheckpointManifest {
    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("manifest serialization cannot fail")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let m: CheckpointManifest = serde_json::from_slice(bytes)?;
        m.validate()?;
        Ok(m)
    }

    pub fn bitwidth(&self) -> Result<Option<BitWidth>> {
        self.bitwidth.map(BitWidth::from_bits).transpose().map_err(Error::from)
    }

    /// Id of the full checkpoint at the root of this checkpoint's chain.
    pub fn chain_base(&self) -> u64 {
        self.base_id.unwrap_or(self.checkpoint_id)
    }

    pub fn reader(&self) -> ReaderState {
        ReaderState { batches_consumed: self.reader_batches_consumed, rng_cursor: self.reader_rng_cursor }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            rows_per_table: self.tables.iter().map(|t| t.rows).collect(),
            dim: self.dim,
            num_shards: self.num_shards,
            dense_len: self.dense_len,
            has_aux_state: self.has_aux,
        }
    }

    /// Every object the checkpoint references, dense included.
    pub fn objects(&self) -> impl Iterator<Item = &ObjectEntry> {
        self.shards.iter().flat_map(|s| s.objects.iter()).chain(std::iter::once(&self.dense))
    }

    pub fn total_bytes(&self) -> u64 {
        self.objects().map(|o| o.bytes).sum()
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Integrity(format!("checkpoint {}: {msg}", self.checkpoint_id)));
        if self.format_version != FORMAT_VERSION {
            return bad(format!("unsupported format version {}", self.format_version));
        }
        self.bitwidth()?;
        match (self.kind, self.parent_id) {
            (CheckpointKind::Full, None) if self.base_id.is_none() => {}
            (CheckpointKind::Incremental, Some(p))
                if p < self.checkpoint_id && self.base_id.is_some_and(|b| b <= p) => {}
            _ => return bad("inconsistent kind, base and parent".into()),
        }
        if self.tables.iter().enumerate().any(|(i, t)| t.table_id as usize != i) {
            return bad("tables must be listed by id".into());
        }
        if self.shards.len() != self.num_shards
            || self.shards.iter().enumerate().any(|(i, s)| s.shard_id != i)
        {
            return bad("shards must be listed by id".into());
        }
        let config = self.model_config();
        config.validate()?;
        if self.tables.iter().any(|t| t.shard_id != config.shard_of(t.table_id)) {
            return bad("table shard assignment mismatch".into());
        }
        if !(0.0..=1.0).contains(&self.row_fraction) {
            return bad("row fraction out of range".into());
        }
        Ok(())
    }
}
