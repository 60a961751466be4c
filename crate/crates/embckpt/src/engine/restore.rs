use std::collections::BTreeSet;

use embckpt_core::payload::{decode_dense, ShardPayload};
use embckpt_core::{BitWidth, CheckpointKind, EmbeddingTable, ModelState, Scope, Tracker};

use crate::error::{Error, Result};
use crate::store::{CheckpointManifest, CheckpointStore};

/// State rebuilt from a checkpoint chain.
#[derive(Debug, Clone)]
pub struct Restored {
    pub model: ModelState,
    /// Since-baseline scope holds every row stored by the chain's
    /// increments; the interval scope is empty.
    pub tracker: Tracker,
    pub checkpoint_id: u64,
    pub base_id: u64,
    /// Checkpoint ids applied, oldest first.
    pub chain: Vec<u64>,
    pub history: Vec<f64>,
    pub bitwidth: Option<BitWidth>,
    pub policy: String,
}

/// Restores the newest committed checkpoint of `run`. With `fallback`, a
/// checkpoint that fails verification is skipped in favour of the next
/// older one.
pub fn restore(store: &CheckpointStore, run: &str, fallback: bool) -> Result<Restored> {
    let ids = store.valid_ids(run)?;
    let mut last_err = None;
    for &id in ids.iter().rev() {
        match restore_checkpoint(store, run, id) {
            Ok(r) => return Ok(r),
            Err(e) if fallback && e.is_corruption() => {
                log::warn!("checkpoint {id} of run `{run}` is unusable, trying an older one: {e}");
                last_err = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::NoCheckpoint(run.to_owned())))
}

/// Materializes checkpoint `id`: the chain's full checkpoint, then each
/// increment in order, each row overwriting the previous value.
pub fn restore_checkpoint(store: &CheckpointStore, run: &str, id: u64) -> Result<Restored> {
    let chain = store.resolve_chain(run, id)?;
    let head = chain.last().expect("chains are non-empty");
    let config = head.model_config();
    config.validate()?;
    let mut tables: Vec<EmbeddingTable> = config
        .rows_per_table
        .iter()
        .enumerate()
        .map(|(t, &rows)| EmbeddingTable::zeros(t as u32, rows, config.dim, config.has_aux_state))
        .collect();
    let mut tracker = Tracker::new(&config);

    for (pos, m) in chain.iter().enumerate() {
        if m.model_config() != config {
            return Err(Error::Integrity(format!(
                "checkpoint {} has a different model shape than {id}",
                m.checkpoint_id
            )));
        }
        let expected_kind = if pos == 0 { CheckpointKind::Full } else { CheckpointKind::Incremental };
        if m.kind != expected_kind {
            return Err(Error::Integrity(format!(
                "checkpoint {} out of place in its chain",
                m.checkpoint_id
            )));
        }
        apply_checkpoint(store, m, &mut tables, &mut tracker)?;
    }

    let dense = decode_dense(&store.read_object(&head.dense)?)?;
    let model = ModelState::from_parts(config, tables, dense, head.reader())?;
    Ok(Restored {
        model,
        tracker,
        checkpoint_id: head.checkpoint_id,
        base_id: head.chain_base(),
        chain: chain.iter().map(|m| m.checkpoint_id).collect(),
        history: head.history.clone(),
        bitwidth: head.bitwidth()?,
        policy: head.policy.clone(),
    })
}

fn apply_checkpoint(
    store: &CheckpointStore,
    m: &CheckpointManifest,
    tables: &mut [EmbeddingTable],
    tracker: &mut Tracker,
) -> Result<()> {
    let bad = |msg: String| Error::Integrity(format!("checkpoint {}: {msg}", m.checkpoint_id));
    let config = m.model_config();
    let bitwidth = m.bitwidth()?;
    for shard in &m.shards {
        let mut rows_seen = 0u64;
        let mut tables_seen = BTreeSet::new();
        for obj in &shard.objects {
            let payload = ShardPayload::parse(&store.read_object(obj)?, m.kind)?;
            for section in payload.sections {
                let h = section.header;
                let t = h.table_id as usize;
                if t >= tables.len() || config.shard_of(h.table_id) != shard.shard_id {
                    return Err(bad(format!("table {t} is not on shard {}", shard.shard_id)));
                }
                if !tables_seen.insert(h.table_id) {
                    return Err(bad(format!("table {t} appears twice")));
                }
                let table = &mut tables[t];
                if h.dim as usize != table.dim || h.has_aux != table.aux.is_some() || h.bitwidth != bitwidth {
                    return Err(bad(format!("section for table {t} does not match the manifest")));
                }
                if m.kind == CheckpointKind::Full && h.row_count != table.rows as u64 {
                    return Err(bad(format!("full section for table {t} is incomplete")));
                }
                let mut restored_rows = Vec::with_capacity(section.rows.len());
                for rec in &section.rows {
                    let r = rec.row_index as usize;
                    if r >= table.rows {
                        return Err(bad(format!("row {r} out of range for table {t}")));
                    }
                    table.row_mut(r).copy_from_slice(&rec.decode_values()?);
                    if let (Some(src), Some(dst)) = (&rec.aux, table.aux_row_mut(r)) {
                        dst.copy_from_slice(src);
                    }
                    restored_rows.push(rec.row_index);
                }
                if m.kind == CheckpointKind::Incremental {
                    tracker.bitmap_mut(Scope::SinceBaseline, h.table_id).mark(&restored_rows)?;
                }
                rows_seen += h.row_count;
            }
        }
        let expected: BTreeSet<u32> = config.tables_of_shard(shard.shard_id).collect();
        if tables_seen != expected {
            return Err(bad(format!("shard {} does not cover its tables", shard.shard_id)));
        }
        if rows_seen != shard.rows {
            return Err(bad(format!("shard {} row count mismatch", shard.shard_id)));
        }
    }
    Ok(())
}
