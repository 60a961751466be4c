mod common;

use std::sync::Arc;

use common::{commit_opaque, draft, mem_store, store_over};
use embckpt::store::{
    ckpt_prefix, manifest_key, pending_prefix, CheckpointStore, Fault, FaultyStore, LocalDirStore, MemStore,
    ObjectStore,
};
use embckpt::Error;
use embckpt_core::{CheckpointKind, ModelConfig};

const RUN: &str = "r1";
use CheckpointKind::{Full, Incremental};

fn cfg(shards: usize) -> ModelConfig {
    ModelConfig::uniform(shards, 4, 2, shards)
}

#[test]
fn pending_objects_are_invisible_until_commit() {
    let (mem, store) = mem_store();
    let config = cfg(2);
    let mut h = store.begin(RUN, draft(&config, Full, None, None)).unwrap();
    store.put_shard(&mut h, 0, b"abc").unwrap();
    assert!(!mem.list(&pending_prefix(RUN, 1)).unwrap().is_empty());
    assert_eq!(store.latest_valid(RUN).unwrap(), None);
    store.put_shard(&mut h, 1, b"def").unwrap();
    store.put_dense(&mut h, b"").unwrap();
    let m = store.commit(&mut h).unwrap();
    assert_eq!(m.checkpoint_id, 1);
    assert_eq!(store.latest_valid(RUN).unwrap(), Some(1));
    assert!(mem.list(&pending_prefix(RUN, 1)).unwrap().is_empty());
    assert_eq!(store.load_manifest(RUN, 1).unwrap(), m);
    assert_eq!(m.base_id, None);
}

#[test]
fn second_begin_conflicts_until_the_first_finishes() {
    let (_, store) = mem_store();
    let config = cfg(1);
    let h = store.begin(RUN, draft(&config, Full, None, None)).unwrap();
    assert!(matches!(store.begin(RUN, draft(&config, Full, None, None)), Err(Error::Conflict(_))));
    // other runs are independent
    let other = store.begin("r2", draft(&config, Full, None, None)).unwrap();
    store.abort(h).unwrap();
    drop(other);
    assert!(store.begin(RUN, draft(&config, Full, None, None)).is_ok());
}

#[test]
fn abort_removes_pending_and_keeps_latest() {
    let (mem, store) = mem_store();
    let config = cfg(2);
    let first = commit_opaque(&store, RUN, &config, Full, None, None);
    let mut h = store.begin(RUN, draft(&config, Full, None, None)).unwrap();
    store.put_shard(&mut h, 0, b"x").unwrap();
    store.abort(h).unwrap();
    assert!(mem.list(&format!("runs/{RUN}/pending/")).unwrap().is_empty());
    assert_eq!(store.latest_valid(RUN).unwrap(), Some(first));
}

#[test]
fn duplicate_and_missing_shards() {
    let (_, store) = mem_store();
    let config = cfg(2);
    let mut h = store.begin(RUN, draft(&config, Full, None, None)).unwrap();
    store.put_shard(&mut h, 0, b"a").unwrap();
    assert!(matches!(store.put_shard(&mut h, 0, b"b"), Err(Error::Precondition(_))));
    assert!(matches!(store.put_shard(&mut h, 2, b"b"), Err(Error::Precondition(_))));
    store.put_dense(&mut h, b"").unwrap();
    assert!(matches!(store.commit(&mut h), Err(Error::Precondition(_))));
    store.put_shard(&mut h, 1, b"b").unwrap();
    assert!(store.commit(&mut h).is_ok());
}

#[test]
fn io_failure_on_shard_two_of_four_forbids_commit() {
    // mutation 0..=1 are shards 0 and 1; mutation 2 is shard 2
    let faulty = Arc::new(FaultyStore::new(MemStore::new()).fail_mutation(2, Fault::Error));
    let store = store_over(faulty.clone());
    let config = cfg(4);
    let mut h = store.begin(RUN, draft(&config, Full, None, None)).unwrap();
    store.put_shard(&mut h, 0, b"0").unwrap();
    store.put_shard(&mut h, 1, b"1").unwrap();
    assert!(matches!(store.put_shard(&mut h, 2, b"2"), Err(Error::Io(_))));
    store.put_shard(&mut h, 3, b"3").unwrap();
    store.put_dense(&mut h, b"").unwrap();
    assert!(matches!(store.commit(&mut h), Err(Error::Precondition(_))));
    store.abort(h).unwrap();
    assert!(faulty.inner().list("runs/").unwrap().is_empty());
    assert_eq!(store.latest_valid(RUN).unwrap(), None);
}

#[test]
fn crash_before_manifest_keeps_previous_latest() {
    let mem = Arc::new(MemStore::new());
    let config = cfg(2);
    let first = commit_opaque(&CheckpointStore::new(mem.clone()), RUN, &config, Full, None, None);

    // Second checkpoint: 3 staged puts, 3 copies, then the manifest (7th).
    let faulty = Arc::new(FaultyStore::new(mem.clone()).fail_mutation(6, Fault::Crash));
    let store = store_over(faulty.clone());
    let mut h = store.begin(RUN, draft(&config, Incremental, Some(first), Some(first))).unwrap();
    store.put_shard(&mut h, 0, b"a").unwrap();
    store.put_shard(&mut h, 1, b"b").unwrap();
    store.put_dense(&mut h, b"c").unwrap();
    assert!(store.commit(&mut h).is_err());
    assert!(faulty.crashed());

    // restart on the surviving objects
    let restarted = CheckpointStore::new(mem.clone());
    assert_eq!(restarted.latest_valid(RUN).unwrap(), Some(first));
    restarted.verify(RUN, first).unwrap();
    let orphans = restarted.cleanup_pending(RUN).unwrap();
    assert!(!orphans.is_empty());
    assert!(mem.list(&ckpt_prefix(RUN, 2)).unwrap().is_empty());
    // the next id does not reuse 2's objects
    assert_eq!(commit_opaque(&restarted, RUN, &config, Full, None, None), 2);
}

#[test]
fn empty_incremental_commits() {
    let (_, store) = mem_store();
    let config = cfg(1);
    let base = commit_opaque(&store, RUN, &config, Full, None, None);
    let mut h = store.begin(RUN, draft(&config, Incremental, Some(base), Some(base))).unwrap();
    store.put_shard(&mut h, 0, b"").unwrap();
    store.put_dense(&mut h, b"").unwrap();
    let m = store.commit(&mut h).unwrap();
    assert_eq!(m.shards[0].rows, 0);
    assert_eq!(store.latest_valid(RUN).unwrap(), Some(m.checkpoint_id));
}

#[test]
fn chain_resolution() {
    let (mem, store) = mem_store();
    let config = cfg(1);
    // one-shot: both increments hang off the base
    let b = commit_opaque(&store, RUN, &config, Full, None, None);
    let i2 = commit_opaque(&store, RUN, &config, Incremental, Some(b), Some(b));
    let i3 = commit_opaque(&store, RUN, &config, Incremental, Some(b), Some(b));
    let ids = |id| store.resolve_chain(RUN, id).unwrap().iter().map(|m| m.checkpoint_id).collect::<Vec<_>>();
    assert_eq!(ids(b), vec![b]);
    assert_eq!(ids(i3), vec![b, i3]);
    // consecutive: each increment hangs off the previous one
    let b2 = commit_opaque(&store, RUN, &config, Full, None, None);
    let c1 = commit_opaque(&store, RUN, &config, Incremental, Some(b2), Some(b2));
    let c2 = commit_opaque(&store, RUN, &config, Incremental, Some(b2), Some(c1));
    assert_eq!(ids(c2), vec![b2, c1, c2]);
    assert_eq!(i2 + 1, i3);

    mem.delete(&manifest_key(RUN, c1)).unwrap();
    assert!(matches!(store.resolve_chain(RUN, c2), Err(Error::Integrity(_))));
}

#[test]
fn gc_reference_rule() {
    let (_, store) = mem_store();
    let config = cfg(1);
    let b1 = commit_opaque(&store, RUN, &config, Full, None, None);
    let i2 = commit_opaque(&store, RUN, &config, Incremental, Some(b1), Some(b1));
    assert!(store.gc(RUN, 1).unwrap().is_empty(), "keep=1 retains the base of the increment");
    assert_eq!(store.valid_ids(RUN).unwrap(), vec![b1, i2]);

    let b3 = commit_opaque(&store, RUN, &config, Full, None, None);
    assert_eq!(store.gc(RUN, 1).unwrap(), vec![b1, i2]);
    assert_eq!(store.valid_ids(RUN).unwrap(), vec![b3]);
    store.verify(RUN, b3).unwrap();
    assert!(matches!(store.gc(RUN, 0), Err(Error::Config(_))));
}

#[test]
fn interrupted_gc_never_breaks_a_valid_chain() {
    for crash_at in 0..40 {
        let mem = Arc::new(MemStore::new());
        let faulty = Arc::new(FaultyStore::new(Arc::clone(&mem)));
        let store = store_over(faulty.clone());
        let config = cfg(1);
        let b1 = commit_opaque(&store, RUN, &config, Full, None, None);
        let i2 = commit_opaque(&store, RUN, &config, Incremental, Some(b1), Some(b1));
        commit_opaque(&store, RUN, &config, Incremental, Some(b1), Some(i2));
        commit_opaque(&store, RUN, &config, Full, None, None);
        faulty.inject(faulty.mutations() + crash_at, Fault::Crash);
        let finished = store.gc(RUN, 1).is_ok();

        let fresh = store_over(mem);
        for id in fresh.valid_ids(RUN).unwrap() {
            fresh.verify(RUN, id).unwrap_or_else(|e| panic!("crash at {crash_at}: {id}: {e}"));
        }
        if finished {
            assert_eq!(fresh.valid_ids(RUN).unwrap().len(), 1);
            break;
        }
    }
}

#[test]
fn gc_keeps_consecutive_chain() {
    let (_, store) = mem_store();
    let config = cfg(1);
    let b = commit_opaque(&store, RUN, &config, Full, None, None);
    let mut parent = b;
    for _ in 0..4 {
        parent = commit_opaque(&store, RUN, &config, Incremental, Some(b), Some(parent));
    }
    assert!(store.gc(RUN, 1).unwrap().is_empty());
    assert_eq!(store.resolve_chain(RUN, parent).unwrap().len(), 5);
}

#[test]
fn gc_removes_one_of_two_independent_fulls() {
    let (mem, store) = mem_store();
    let config = cfg(1);
    let b1 = commit_opaque(&store, RUN, &config, Full, None, None);
    let b2 = commit_opaque(&store, RUN, &config, Full, None, None);
    assert_eq!(store.gc(RUN, 1).unwrap(), vec![b1]);
    assert!(mem.list(&ckpt_prefix(RUN, b1)).unwrap().is_empty());
    assert_eq!(store.latest_valid(RUN).unwrap(), Some(b2));
}

#[test]
fn checksum_mismatch_is_an_integrity_error() {
    let (mem, store) = mem_store();
    let config = cfg(1);
    let id = commit_opaque(&store, RUN, &config, Full, None, None);
    let m = store.load_manifest(RUN, id).unwrap();
    mem.tamper(&m.shards[0].objects[0].key, |b| b[0] ^= 1).unwrap();
    assert!(matches!(store.verify(RUN, id), Err(Error::Integrity(_))));
    mem.tamper(&manifest_key(RUN, id), |b| b.truncate(10)).unwrap();
    assert!(store.load_manifest(RUN, id).unwrap_err().is_corruption());
}

#[test]
fn manifest_records_checksums_and_table_directory() {
    let (_, store) = mem_store();
    let config = ModelConfig::uniform(3, 5, 2, 2);
    let id = commit_opaque(&store, RUN, &config, Full, None, None);
    let m = store.load_manifest(RUN, id).unwrap();
    assert_eq!(m.shards[1].objects[0].crc32c, crc32c::crc32c(&[1u8; 16]));
    assert_eq!(m.shards[1].objects[0].bytes, 16);
    let dir: Vec<_> = m.tables.iter().map(|t| (t.table_id, t.rows, t.shard_id)).collect();
    assert_eq!(dir, vec![(0, 5, 0), (1, 5, 1), (2, 5, 0)]);
    assert_eq!(m.model_config(), config);
    let json: serde_json::Value = serde_json::from_slice(&m.to_json()).unwrap();
    assert_eq!(json["kind"], "full");
    assert_eq!(json["base_id"], serde_json::Value::Null);
}

#[test]
fn local_directory_layout() {
    let dir = tempfile::tempdir().unwrap();
    let store = CheckpointStore::new(Arc::new(LocalDirStore::open(dir.path()).unwrap()));
    let config = cfg(2);
    let id = commit_opaque(&store, RUN, &config, Full, None, None);
    let final_dir = dir.path().join("runs").join(RUN).join("ckpt").join(format!("{id:020}"));
    assert!(final_dir.join("manifest.json").is_file());
    assert!(final_dir.join("shard-00000.bin").is_file());
    assert!(final_dir.join("dense.bin").is_file());
    assert!(!dir.path().join("runs").join(RUN).join("pending").exists());
    store.verify(RUN, id).unwrap();
}

#[test]
fn bad_run_ids_are_rejected() {
    let (_, store) = mem_store();
    for bad in ["", "a/b", "..", ".hidden", "sp ace"] {
        assert!(store.begin(bad, draft(&cfg(1), Full, None, None)).is_err(), "{bad}");
    }
}
