#![allow(dead_code)]

use std::sync::Arc;

use embckpt::store::{CheckpointStore, ManifestDraft, MemStore, ObjectStore};
use embckpt_core::{CheckpointKind, ModelConfig, ReaderState};

pub fn mem_store() -> (Arc<MemStore>, CheckpointStore) {
    let mem = Arc::new(MemStore::new());
    (Arc::clone(&mem), CheckpointStore::new(mem))
}

pub fn store_over(objects: Arc<dyn ObjectStore>) -> CheckpointStore {
    CheckpointStore::new(objects)
}

pub fn draft(
    config: &ModelConfig,
    kind: CheckpointKind,
    base: Option<u64>,
    parent: Option<u64>,
) -> ManifestDraft {
    ManifestDraft {
        kind,
        base_id: base,
        parent_id: parent,
        policy: "intermittent".into(),
        bitwidth: None,
        snapshot_batch: 0,
        reader: ReaderState::default(),
        config: config.clone(),
        shard_rows: vec![0; config.num_shards],
        row_fraction: 0.0,
        history: Vec::new(),
    }
}

/// Writes and commits a checkpoint whose objects are opaque filler bytes.
pub fn commit_opaque(
    store: &CheckpointStore,
    run: &str,
    config: &ModelConfig,
    kind: CheckpointKind,
    base: Option<u64>,
    parent: Option<u64>,
) -> u64 {
    let mut h = store.begin(run, draft(config, kind, base, parent)).unwrap();
    for k in 0..config.num_shards {
        store.put_shard(&mut h, k, &[k as u8; 16]).unwrap();
    }
    store.put_dense(&mut h, &[7; 8]).unwrap();
    store.commit(&mut h).unwrap().checkpoint_id
}
