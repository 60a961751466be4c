//! Background quantize-and-write of one checkpoint.
//!
//! Workers claim shards and encode their rows in chunks of `chunk_rows`,
//! sending each chunk over a bounded channel. The job thread assembles each
//! shard's object from its chunks and stages it as soon as the shard's last
//! chunk arrives, so encoding of later shards overlaps with writing earlier
//! ones. Rows are encoded independently, so the bytes do not depend on the
//! chunk size or on the number of workers.

use std::mem;
use std::sync::atomic::{AtomicBool, AtomicU8, AtomicUsize, Ordering};
use std::sync::mpsc::{sync_channel, SyncSender};
use std::sync::Arc;
use std::thread;

use embckpt_core::payload::{encode_dense, RowCodec};
use embckpt_core::policy::RowSelection;
use embckpt_core::{CheckpointPlan, ModelSnapshot};

use super::JobState;
use crate::error::{Error, Result};
use crate::store::{CheckpointManifest, CheckpointStore, ManifestDraft};

pub(super) struct JobSpec {
    pub store: CheckpointStore,
    pub run_id: String,
    pub snapshot: Arc<ModelSnapshot>,
    pub plan: CheckpointPlan,
    pub codec: RowCodec,
    pub chunk_rows: usize,
    pub workers: usize,
    pub keep_last: usize,
    pub draft: ManifestDraft,
    pub state: Arc<AtomicU8>,
}

#[derive(Debug, Clone)]
pub(super) struct CommitInfo {
    pub manifest: CheckpointManifest,
    pub live_bytes: u64,
    pub gc_deleted: Vec<u64>,
}

enum Msg {
    Data { shard: usize, bytes: Vec<u8> },
    Done { shard: usize },
}

fn set_state(state: &AtomicU8, s: JobState) {
    state.store(s as u8, Ordering::Release);
}

pub(super) fn run_job(spec: JobSpec) -> Result<CommitInfo> {
    set_state(&spec.state, JobState::Optimizing);
    let mut handle = match spec.store.begin(&spec.run_id, spec.draft.clone()) {
        Ok(h) => h,
        Err(e) => {
            set_state(&spec.state, JobState::Aborted);
            return Err(e);
        }
    };
    let written = (|| {
        write_shards(&spec, |shard, bytes| {
            set_state(&spec.state, JobState::Writing);
            spec.store.put_shard(&mut handle, shard, &bytes)
        })?;
        set_state(&spec.state, JobState::Writing);
        spec.store.put_dense(&mut handle, &encode_dense(&spec.snapshot.dense))?;
        spec.store.commit(&mut handle)
    })();
    let manifest = match written {
        Ok(m) => m,
        Err(e) => {
            if let Err(cleanup) = spec.store.abort(handle) {
                log::warn!("abort of checkpoint left objects behind: {cleanup}");
            }
            set_state(&spec.state, JobState::Aborted);
            return Err(e);
        }
    };
    drop(handle);
    set_state(&spec.state, JobState::Committed);
    // The checkpoint is durable at this point; retention problems only cost
    // space.
    let gc_deleted = spec.store.gc(&spec.run_id, spec.keep_last).unwrap_or_else(|e| {
        log::warn!("retention pass failed: {e}");
        Vec::new()
    });
    let live_bytes = spec.store.live_bytes(&spec.run_id).unwrap_or_else(|e| {
        log::warn!("could not measure live bytes: {e}");
        manifest.total_bytes()
    });
    Ok(CommitInfo { manifest, live_bytes, gc_deleted })
}

/// Encodes every shard and hands each completed shard object to `sink`, in
/// completion order.
fn write_shards(spec: &JobSpec, mut sink: impl FnMut(usize, Vec<u8>) -> Result<()>) -> Result<()> {
    let num_shards = spec.snapshot.shards.len();
    let workers = spec.workers.clamp(1, num_shards.max(1));
    let (tx, rx) = sync_channel::<Result<Msg>>(workers * 4);
    let next = AtomicUsize::new(0);
    let cancel = AtomicBool::new(false);
    thread::scope(|s| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, cancel) = (&next, &cancel);
            s.spawn(move || loop {
                let shard = next.fetch_add(1, Ordering::Relaxed);
                if shard >= num_shards || cancel.load(Ordering::Relaxed) {
                    break;
                }
                let sent = encode_shard(spec, shard, &tx);
                if !sent {
                    break;
                }
            });
        }
        drop(tx);
        let mut buffers: Vec<Vec<u8>> = vec![Vec::new(); num_shards];
        let mut result = Ok(());
        for msg in rx.iter() {
            let step = msg.and_then(|m| match m {
                Msg::Data { shard, bytes } => {
                    buffers[shard].extend_from_slice(&bytes);
                    Ok(())
                }
                Msg::Done { shard } => sink(shard, mem::take(&mut buffers[shard])),
            });
            if let Err(e) = step {
                result = Err(e);
                break;
            }
        }
        cancel.store(true, Ordering::Relaxed);
        // Dropping the receiver unblocks workers waiting to send.
        drop(rx);
        result
    })
}

/// Returns false once the receiver is gone.
fn encode_shard(spec: &JobSpec, shard: usize, tx: &SyncSender<Result<Msg>>) -> bool {
    let kind = spec.plan.kind;
    let chunk = spec.chunk_rows.max(1);
    let send = |m: Result<Msg>| tx.send(m).is_ok();
    for table in &spec.snapshot.shards[shard].tables {
        let selection = &spec.plan.tables[table.table_id as usize];
        let count = selection.count(table.rows);
        let mut buf = Vec::new();
        spec.codec.header(table, count as u64).encode(&mut buf);
        let rows: Box<dyn Iterator<Item = u64>> = match selection {
            RowSelection::All => Box::new(0..table.rows as u64),
            RowSelection::Rows(r) => Box::new(r.iter().copied()),
        };
        for (i, row) in rows.enumerate() {
            if let Err(e) = spec.codec.encode_row(table, row, kind, &mut buf) {
                send(Err(Error::from(e)));
                return false;
            }
            if (i + 1) % chunk == 0 && !send(Ok(Msg::Data { shard, bytes: mem::take(&mut buf) })) {
                return false;
            }
        }
        if !buf.is_empty() && !send(Ok(Msg::Data { shard, bytes: buf })) {
            return false;
        }
    }
    send(Ok(Msg::Done { shard }))
}

/// Rows written per shard under `plan`.
pub(super) fn shard_rows(snapshot: &ModelSnapshot, plan: &CheckpointPlan) -> Vec<u64> {
    snapshot
        .shards
        .iter()
        .map(|s| s.tables.iter().map(|t| plan.tables[t.table_id as usize].count(t.rows) as u64).sum())
        .collect()
}

/// Encodes one shard in a single pass, without the pipeline. The pipeline's
/// output must match this byte for byte.
pub fn encode_shard_whole(
    snapshot: &ModelSnapshot,
    plan: &CheckpointPlan,
    codec: &RowCodec,
    shard: usize,
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for table in &snapshot.shards[shard].tables {
        let selection = &plan.tables[table.table_id as usize];
        codec.header(table, selection.count(table.rows) as u64).encode(&mut out);
        match selection {
            RowSelection::All => {
                for r in 0..table.rows as u64 {
                    codec.encode_row(table, r, plan.kind, &mut out)?;
                }
            }
            RowSelection::Rows(rows) => {
                for &r in rows {
                    codec.encode_row(table, r, plan.kind, &mut out)?;
                }
            }
        }
    }
    Ok(out)
}
