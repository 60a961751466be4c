//! Checkpoint layout on top of an [`ObjectStore`].
//!
//! ```text
//! runs/<run>/pending/<id>/shard-<k>.bin   staged, not yet committed
//! runs/<run>/pending/<id>/dense.bin
//! runs/<run>/ckpt/<id>/shard-<k>.bin      committed objects
//! runs/<run>/ckpt/<id>/dense.bin
//! runs/<run>/ckpt/<id>/manifest.json      written last
//! ```
//!
//! A checkpoint is valid exactly when its manifest exists. Commit copies the
//! staged objects under the final prefix, writes the manifest, and only then
//! removes the staging copies, so a crash at any point leaves either no
//! manifest or a manifest whose objects are all present.

use std::collections::{BTreeSet, HashSet};
use std::io;
use std::sync::{Arc, Mutex};

use embckpt_core::{BitWidth, CheckpointKind, ModelConfig, ReaderState};

use super::manifest::{CheckpointManifest, ObjectEntry, ShardEntry, TableEntry, FORMAT_VERSION};
use super::ObjectStore;
use crate::error::{Error, Result};

const MANIFEST: &str = "manifest.json";
const DENSE: &str = "dense.bin";

fn run_prefix(run: &str) -> String {
    format!("runs/{run}/")
}

pub fn pending_prefix(run: &str, id: u64) -> String {
    format!("runs/{run}/pending/{id:020}/")
}

pub fn ckpt_prefix(run: &str, id: u64) -> String {
    format!("runs/{run}/ckpt/{id:020}/")
}

pub fn manifest_key(run: &str, id: u64) -> String {
    format!("{}{MANIFEST}", ckpt_prefix(run, id))
}

fn shard_name(shard: usize) -> String {
    format!("shard-{shard:05}.bin")
}

fn check_run_id(run: &str) -> Result<()> {
    let ok = !run.is_empty()
        && !run.starts_with('.')
        && run.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!("invalid run id `{run}`")))
    }
}

/// Everything about a checkpoint that is known before its objects exist.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestDraft {
    pub kind: CheckpointKind,
    /// Chain base for an incremental checkpoint; ignored for a full one.
    pub base_id: Option<u64>,
    /// Checkpoint an incremental applies on top of.
    pub parent_id: Option<u64>,
    pub policy: String,
    pub bitwidth: Option<BitWidth>,
    pub snapshot_batch: u64,
    pub reader: ReaderState,
    pub config: ModelConfig,
    /// Rows written per shard.
    pub shard_rows: Vec<u64>,
    pub row_fraction: f64,
    /// Increment sizes since the base, this checkpoint included.
    pub history: Vec<f64>,
}

/// Releases the run's single in-flight slot when dropped.
#[derive(Debug)]
struct Slot {
    in_flight: Arc<Mutex<HashSet<String>>>,
    run: String,
}

impl Drop for Slot {
    fn drop(&mut self) {
        self.in_flight.lock().unwrap().remove(&self.run);
    }
}

/// A checkpoint being written. At most one exists per run at a time.
#[derive(Debug)]
pub struct WriteHandle {
    run: String,
    id: u64,
    draft: ManifestDraft,
    shards: Vec<Option<ObjectEntry>>,
    dense: Option<ObjectEntry>,
    committed: bool,
    _slot: Slot,
}

impl WriteHandle {
    pub fn checkpoint_id(&self) -> u64 {
        self.id
    }

    pub fn run_id(&self) -> &str {
        &self.run
    }

    pub fn draft(&self) -> &ManifestDraft {
        &self.draft
    }

    /// Bytes staged so far.
    pub fn staged_bytes(&self) -> u64 {
        self.shards.iter().flatten().chain(&self.dense).map(|o| o.bytes).sum()
    }
}

#[derive(Debug, Clone)]
pub struct CheckpointStore {
    objects: Arc<dyn ObjectStore>,
    in_flight: Arc<Mutex<HashSet<String>>>,
}

impl CheckpointStore {
    pub fn new(objects: Arc<dyn ObjectStore>) -> Self {
        CheckpointStore { objects, in_flight: Arc::default() }
    }

    pub fn objects(&self) -> &Arc<dyn ObjectStore> {
        &self.objects
    }

    /// Reserves the next checkpoint id of `run` and opens a write.
    pub fn begin(&self, run: &str, draft: ManifestDraft) -> Result<WriteHandle> {
        check_run_id(run)?;
        draft.config.validate()?;
        if draft.shard_rows.len() != draft.config.num_shards {
            return Err(Error::Precondition("one row count per shard is required".into()));
        }
        if draft.kind == CheckpointKind::Incremental && (draft.base_id.is_none() || draft.parent_id.is_none())
        {
            return Err(Error::Precondition("an incremental checkpoint needs a base and a parent".into()));
        }
        if !self.in_flight.lock().unwrap().insert(run.to_owned()) {
            return Err(Error::Conflict(format!("run `{run}` already has a checkpoint in flight")));
        }
        let slot = Slot { in_flight: Arc::clone(&self.in_flight), run: run.to_owned() };
        let id = self.next_id(run)?;
        if let Some(p) = draft.parent_id {
            if p >= id {
                return Err(Error::Precondition(format!("parent {p} is not older than {id}")));
            }
        }
        let shards = vec![None; draft.config.num_shards];
        Ok(WriteHandle { run: run.to_owned(), id, draft, shards, dense: None, committed: false, _slot: slot })
    }

    fn next_id(&self, run: &str) -> Result<u64> {
        let prefix = run_prefix(run);
        let mut max = 0;
        for key in self.objects.list(&prefix)? {
            let mut parts = key[prefix.len()..].split('/');
            if let (Some("ckpt" | "pending"), Some(id)) = (parts.next(), parts.next()) {
                if let Ok(id) = id.parse::<u64>() {
                    max = max.max(id);
                }
            }
        }
        Ok(max + 1)
    }

    fn stage(&self, h: &WriteHandle, name: &str, bytes: &[u8]) -> Result<ObjectEntry> {
        if h.committed {
            return Err(Error::Precondition("checkpoint already committed".into()));
        }
        let key = format!("{}{name}", pending_prefix(&h.run, h.id));
        self.objects.put(&key, bytes)?;
        Ok(ObjectEntry {
            key: format!("{}{name}", ckpt_prefix(&h.run, h.id)),
            bytes: bytes.len() as u64,
            crc32c: crc32c::crc32c(bytes),
        })
    }

    pub fn put_shard(&self, h: &mut WriteHandle, shard: usize, bytes: &[u8]) -> Result<()> {
        if shard >= h.shards.len() {
            return Err(Error::Precondition(format!("shard {shard} out of range")));
        }
        if h.shards[shard].is_some() {
            return Err(Error::Precondition(format!("shard {shard} already written")));
        }
        let entry = self.stage(h, &shard_name(shard), bytes)?;
        h.shards[shard] = Some(entry);
        Ok(())
    }

    pub fn put_dense(&self, h: &mut WriteHandle, bytes: &[u8]) -> Result<()> {
        if h.dense.is_some() {
            return Err(Error::Precondition("dense object already written".into()));
        }
        h.dense = Some(self.stage(h, DENSE, bytes)?);
        Ok(())
    }

    /// Publishes the checkpoint. Requires every shard and the dense object to
    /// be staged.
    pub fn commit(&self, h: &mut WriteHandle) -> Result<CheckpointManifest> {
        if h.committed {
            return Err(Error::Precondition("checkpoint already committed".into()));
        }
        let missing = h.shards.iter().position(Option::is_none);
        let (Some(dense), None) = (h.dense.clone(), missing) else {
            return Err(Error::Precondition(format!(
                "checkpoint {} is missing shard or dense objects",
                h.id
            )));
        };
        let d = &h.draft;
        let config = &d.config;
        let manifest = CheckpointManifest {
            format_version: FORMAT_VERSION,
            run_id: h.run.clone(),
            checkpoint_id: h.id,
            kind: d.kind,
            base_id: match d.kind {
                CheckpointKind::Full => None,
                CheckpointKind::Incremental => d.base_id,
            },
            parent_id: match d.kind {
                CheckpointKind::Full => None,
                CheckpointKind::Incremental => d.parent_id,
            },
            policy: d.policy.clone(),
            bitwidth: d.bitwidth.map(BitWidth::bits),
            snapshot_batch: d.snapshot_batch,
            reader_batches_consumed: d.reader.batches_consumed,
            reader_rng_cursor: d.reader.rng_cursor,
            num_shards: config.num_shards,
            dim: config.dim,
            dense_len: config.dense_len,
            has_aux: config.has_aux_state,
            tables: (0..config.num_tables())
                .map(|t| TableEntry {
                    table_id: t as u32,
                    rows: config.rows_per_table[t],
                    shard_id: config.shard_of(t as u32),
                })
                .collect(),
            shards: h
                .shards
                .iter()
                .enumerate()
                .map(|(k, o)| ShardEntry {
                    shard_id: k,
                    rows: d.shard_rows[k],
                    objects: vec![o.clone().expect("checked above")],
                })
                .collect(),
            dense,
            row_fraction: d.row_fraction,
            history: d.history.clone(),
        };
        let pending = pending_prefix(&h.run, h.id);
        let staged: Vec<String> = manifest
            .objects()
            .map(|o| format!("{pending}{}", &o.key[ckpt_prefix(&h.run, h.id).len()..]))
            .collect();
        for (src, obj) in staged.iter().zip(manifest.objects()) {
            let bytes = self.objects.get(src)?;
            if crc32c::crc32c(&bytes) != obj.crc32c {
                return Err(Error::Integrity(format!("staged object `{src}` changed")));
            }
            self.objects.put(&obj.key, &bytes)?;
        }
        self.objects.put(&manifest_key(&h.run, h.id), &manifest.to_json())?;
        h.committed = true;
        // Committed; leftover staging copies are swept by `cleanup_pending`.
        for key in &staged {
            if let Err(e) = self.objects.delete(key) {
                log::warn!("could not remove staged object {key}: {e}");
            }
        }
        Ok(manifest)
    }

    /// Discards an uncommitted checkpoint. Best effort: anything left behind
    /// has no manifest and is ignored by readers.
    pub fn abort(&self, h: WriteHandle) -> Result<()> {
        if h.committed {
            return Ok(());
        }
        let mut first_err = None;
        let mut prefixes = vec![pending_prefix(&h.run, h.id)];
        match self.objects.get(&manifest_key(&h.run, h.id)) {
            Err(e) if e.kind() == io::ErrorKind::NotFound => prefixes.push(ckpt_prefix(&h.run, h.id)),
            Ok(_) => {}
            Err(e) => first_err = Some(e),
        }
        for prefix in prefixes {
            match self.objects.list(&prefix) {
                Ok(keys) => {
                    for key in keys {
                        if let Err(e) = self.objects.delete(&key) {
                            first_err.get_or_insert(e);
                        }
                    }
                }
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        first_err.map_or(Ok(()), |e| Err(e.into()))
    }

    /// Ids of committed checkpoints, ascending.
    pub fn valid_ids(&self, run: &str) -> Result<Vec<u64>> {
        check_run_id(run)?;
        let prefix = format!("{}ckpt/", run_prefix(run));
        let mut ids = BTreeSet::new();
        for key in self.objects.list(&prefix)? {
            if let Some((id, MANIFEST)) = key[prefix.len()..].split_once('/') {
                if let Ok(id) = id.parse::<u64>() {
                    ids.insert(id);
                }
            }
        }
        Ok(ids.into_iter().collect())
    }

    pub fn latest_valid(&self, run: &str) -> Result<Option<u64>> {
        Ok(self.valid_ids(run)?.pop())
    }

    pub fn load_manifest(&self, run: &str, id: u64) -> Result<CheckpointManifest> {
        let bytes = self.objects.get(&manifest_key(run, id)).map_err(|e| {
            if e.kind() == io::ErrorKind::NotFound {
                Error::Integrity(format!("checkpoint {id} of run `{run}` has no manifest"))
            } else {
                e.into()
            }
        })?;
        let m = CheckpointManifest::from_json(&bytes)?;
        if m.run_id != run || m.checkpoint_id != id {
            return Err(Error::Integrity(format!("manifest at {id} describes another checkpoint")));
        }
        Ok(m)
    }

    /// Manifests from the chain's full checkpoint up to `id`, oldest first.
    pub fn resolve_chain(&self, run: &str, id: u64) -> Result<Vec<CheckpointManifest>> {
        let mut chain = vec![self.load_manifest(run, id)?];
        loop {
            let last = chain.last().expect("non-empty");
            let Some(parent) = last.parent_id else { break };
            let base = last.base_id;
            let m = self.load_manifest(run, parent)?;
            if m.chain_base() != base.expect("validated with parent") {
                return Err(Error::Integrity(format!("checkpoint {parent} belongs to another chain")));
            }
            chain.push(m);
        }
        chain.reverse();
        Ok(chain)
    }

    /// Reads an object and checks its length and CRC32C.
    pub fn read_object(&self, entry: &ObjectEntry) -> Result<Vec<u8>> {
        let bytes = self.objects.get(&entry.key).map_err(|e| {
            if e.kind() == io::ErrorKind::NotFound {
                Error::Integrity(format!("object `{}` is missing", entry.key))
            } else {
                e.into()
            }
        })?;
        if bytes.len() as u64 != entry.bytes || crc32c::crc32c(&bytes) != entry.crc32c {
            return Err(Error::Integrity(format!("object `{}` fails its checksum", entry.key)));
        }
        Ok(bytes)
    }

    /// Checks every object of every checkpoint in the chain ending at `id`.
    pub fn verify(&self, run: &str, id: u64) -> Result<()> {
        for m in self.resolve_chain(run, id)? {
            for obj in m.objects() {
                self.read_object(obj)?;
            }
        }
        Ok(())
    }

    /// Keeps the newest `keep` checkpoints plus everything they depend on and
    /// deletes the rest. Returns the deleted ids, ascending.
    pub fn gc(&self, run: &str, keep: usize) -> Result<Vec<u64>> {
        if keep == 0 {
            return Err(Error::Config("retention must keep at least one checkpoint".into()));
        }
        let ids = self.valid_ids(run)?;
        let mut live = BTreeSet::new();
        for &id in ids.iter().rev().take(keep) {
            let mut next = Some(id);
            while let Some(cur) = next {
                if !live.insert(cur) {
                    break;
                }
                next = self.load_manifest(run, cur)?.parent_id;
            }
        }
        let mut deleted = Vec::new();
        // Newest first, so an increment goes before the checkpoints it builds
        // on and every remaining manifest keeps an intact chain.
        for &id in ids.iter().rev().filter(|id| !live.contains(id)) {
            // Manifest first: once it is gone the checkpoint is invalid, so a
            // crash midway leaves only unreferenced objects.
            self.objects.delete(&manifest_key(run, id))?;
            for key in self.objects.list(&ckpt_prefix(run, id))? {
                self.objects.delete(&key)?;
            }
            deleted.push(id);
        }
        deleted.reverse();
        Ok(deleted)
    }

    /// Bytes referenced by committed checkpoints of `run`, manifests excluded.
    pub fn live_bytes(&self, run: &str) -> Result<u64> {
        let mut total = 0;
        for id in self.valid_ids(run)? {
            total += self.load_manifest(run, id)?.total_bytes();
        }
        Ok(total)
    }

    /// Staging objects and manifest-less checkpoint objects of `run`, left
    /// behind by an interrupted writer.
    pub fn orphans(&self, run: &str) -> Result<Vec<String>> {
        check_run_id(run)?;
        let valid: HashSet<u64> = self.valid_ids(run)?.into_iter().collect();
        let prefix = run_prefix(run);
        Ok(self
            .objects
            .list(&prefix)?
            .into_iter()
            .filter(|key| {
                let mut parts = key[prefix.len()..].split('/');
                match (parts.next(), parts.next().and_then(|id| id.parse::<u64>().ok())) {
                    (Some("pending"), _) => true,
                    (Some("ckpt"), Some(id)) => !valid.contains(&id),
                    _ => false,
                }
            })
            .collect())
    }

    /// Deletes [`orphans`](Self::orphans). Fails if a write is in flight for
    /// `run`.
    pub fn cleanup_pending(&self, run: &str) -> Result<Vec<String>> {
        check_run_id(run)?;
        let _slot = {
            let mut set = self.in_flight.lock().unwrap();
            if !set.insert(run.to_owned()) {
                return Err(Error::Conflict(format!("run `{run}` has a checkpoint in flight")));
            }
            Slot { in_flight: Arc::clone(&self.in_flight), run: run.to_owned() }
        };
        let orphans = self.orphans(run)?;
        for key in &orphans {
            self.objects.delete(key)?;
        }
        Ok(orphans)
    }
}
