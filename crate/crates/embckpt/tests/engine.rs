mod common;

use std::sync::Arc;
use std::time::Duration;

use common::{mem_store, store_over};
use embckpt::engine::{
    encode_shard_whole, restore, restore_checkpoint, Engine, JobState, QuantSetting, RangeChoice, RunConfig,
};
use embckpt::sim::{Workload, WorkloadConfig};
use embckpt::store::{CheckpointStore, Fault, FaultyStore, MemStore, ObjectStore};
use embckpt::Error;
use embckpt_core::payload::{RowValues, ShardPayload};
use embckpt_core::policy::RowSelection;
use embckpt_core::{
    init_model, BitWidth, CheckpointKind, CheckpointPlan, ModelConfig, ModelState, PolicyKind, Tracker,
};

fn workload(tables: usize, rows: usize, dim: usize, shards: usize) -> WorkloadConfig {
    WorkloadConfig {
        model: ModelConfig {
            has_aux_state: true,
            dense_len: 8,
            ..ModelConfig::uniform(tables, rows, dim, shards)
        },
        batch_size: 20,
        batches_per_interval: 5,
        num_intervals: 6,
        lr: 0.05,
        ..WorkloadConfig::default()
    }
}

fn fp32(policy: PolicyKind) -> RunConfig {
    RunConfig {
        policy,
        quant: QuantSetting::Off,
        chunk_rows: 3,
        workers: 2,
        checkpoint_interval: 5,
        ..RunConfig::default()
    }
}

struct Trainer {
    wl: Workload,
    model: ModelState,
    tracker: Tracker,
}

impl Trainer {
    fn new(cfg: WorkloadConfig) -> Self {
        let model = init_model(cfg.model.clone(), cfg.seed).unwrap();
        let tracker = Tracker::new(&cfg.model);
        Trainer { wl: Workload::new(cfg).unwrap(), model, tracker }
    }

    fn interval(&mut self, engine: &mut Engine) {
        for _ in 0..self.wl.config().batches_per_interval {
            self.wl.step(&mut self.model, &mut self.tracker).unwrap();
        }
        engine.on_interval_end(&self.model, &mut self.tracker).unwrap();
    }
}

#[test]
fn lossless_full_restore_is_bit_identical() {
    let (_, store) = mem_store();
    let mut t = Trainer::new(workload(3, 50, 4, 2));
    let mut engine = Engine::new(store.clone(), fp32(PolicyKind::FullOnly)).unwrap();
    t.interval(&mut engine);
    let report = engine.join(&mut t.tracker).unwrap().unwrap();
    assert_eq!(report.kind, CheckpointKind::Full);
    let r = restore(&store, "run", false).unwrap();
    assert!(r.model.bit_eq(&t.model));
    assert_eq!(r.chain, vec![1]);
}

#[test]
fn chains_restore_bit_identical_for_every_policy() {
    for policy in PolicyKind::ALL {
        let (_, store) = mem_store();
        let mut t = Trainer::new(workload(3, 60, 4, 2));
        let mut engine = Engine::new(store.clone(), fp32(policy)).unwrap();
        for _ in 0..6 {
            t.interval(&mut engine);
        }
        engine.join(&mut t.tracker).unwrap();
        let r = restore(&store, "run", false).unwrap();
        assert!(r.model.bit_eq(&t.model), "{policy}");
        // the rebuilt since-baseline scope matches the live tracker's
        for table in 0..3u32 {
            assert_eq!(r.tracker.since_baseline(table), t.tracker.since_baseline(table), "{policy}");
            assert_eq!(r.tracker.interval(table).count(), 0);
        }
    }
}

#[test]
fn increment_overrides_baseline_row() {
    let (_, store) = mem_store();
    let cfg = workload(1, 10, 2, 1);
    let mut model = init_model(cfg.model.clone(), 3).unwrap();
    let mut tracker = Tracker::new(&cfg.model);
    let mut engine = Engine::new(store.clone(), fp32(PolicyKind::OneShotBaseline)).unwrap();
    engine.on_interval_end(&model, &mut tracker).unwrap();
    model.table_mut(0).row_mut(4).copy_from_slice(&[9.0, -9.0]);
    tracker.mark(0, &[4]).unwrap();
    engine.on_interval_end(&model, &mut tracker).unwrap();
    engine.join(&mut tracker).unwrap();
    let r = restore(&store, "run", false).unwrap();
    assert_eq!(r.chain, vec![1, 2]);
    assert_eq!(r.model.table(0).row(4), &[9.0, -9.0]);
    assert!(r.tracker.since_baseline(0).is_set(4));
    assert_eq!(r.tracker.since_baseline(0).count(), 1);
    let base = restore_checkpoint(&store, "run", 1).unwrap();
    assert_ne!(base.model.table(0).row(4), &[9.0, -9.0]);
}

/// |x - y| <= scale / 2 + one ulp of the larger magnitude.
fn within_bound(x: f32, y: f32, scale: f64) -> bool {
    let m = x.abs().max(y.abs());
    let ulp = (f32::from_bits(m.to_bits() + 1) - m) as f64;
    ((x as f64) - (y as f64)).abs() <= scale / 2.0 + ulp
}

#[test]
fn quantized_restore_respects_each_rows_bound() {
    for method in [RangeChoice::Asymmetric, RangeChoice::Adaptive] {
        for n in BitWidth::ALL {
            let (mem, store) = mem_store();
            let mut t = Trainer::new(workload(2, 40, 8, 1));
            let cfg = RunConfig {
                quant: QuantSetting::Uniform { method, bitwidth: Some(n) },
                ..fp32(PolicyKind::FullOnly)
            };
            let mut engine = Engine::new(store.clone(), cfg).unwrap();
            t.interval(&mut engine);
            engine.join(&mut t.tracker).unwrap();
            let restored = restore(&store, "run", false).unwrap().model;
            let m = store.load_manifest("run", 1).unwrap();
            let bytes = mem.get(&m.shards[0].objects[0].key).unwrap();
            let payload = ShardPayload::parse(&bytes, CheckpointKind::Full).unwrap();
            for section in &payload.sections {
                let tid = section.header.table_id;
                for rec in &section.rows {
                    let RowValues::Quantized { params, .. } = &rec.values else { panic!("expected codes") };
                    let r = rec.row_index as usize;
                    let (orig, back) = (t.model.table(tid).row(r), restored.table(tid).row(r));
                    for (&x, &y) in orig.iter().zip(back) {
                        if x >= params.x_min && x <= params.x_max {
                            assert!(within_bound(x, y, params.scale()), "{method:?} {n}: {x} -> {y}");
                        }
                    }
                    // aux and dense are never quantized
                    assert_eq!(t.model.table(tid).aux_row(r), restored.table(tid).aux_row(r));
                }
            }
            assert_eq!(t.model.dense, restored.dense);
        }
    }
}

#[test]
fn aborted_job_keeps_rows_dirty_for_the_next_checkpoint() {
    let faulty = Arc::new(FaultyStore::new(MemStore::new()));
    let store = store_over(faulty.clone());
    let mut t = Trainer::new(workload(2, 80, 4, 2));
    let mut engine = Engine::new(store.clone(), fp32(PolicyKind::ConsecutiveIncrement)).unwrap();
    t.interval(&mut engine);
    engine.join(&mut t.tracker).unwrap();
    // first staged put of checkpoint 2
    faulty.inject(faulty.mutations(), Fault::Error);
    t.interval(&mut engine);
    let aborted = engine.join(&mut t.tracker).unwrap().unwrap();
    assert!(aborted.error.is_some());
    assert_eq!(aborted.checkpoint_id, None);
    assert_eq!(store.latest_valid("run").unwrap(), Some(1));
    // every row of the failed increment is still pending in the tracker
    assert!(t.tracker.interval(0).count() > 0);

    t.interval(&mut engine);
    let next = engine.join(&mut t.tracker).unwrap().unwrap();
    assert!(next.error.is_none());
    assert!(next.rows_written as f64 >= aborted.rows_written as f64);
    let r = restore(&store, "run", false).unwrap();
    assert!(r.model.bit_eq(&t.model));
    assert_eq!(r.chain, vec![1, next.checkpoint_id.unwrap()]);
}

#[test]
fn trigger_blocks_on_running_job_and_counts_overrun() {
    let slow = Arc::new(FaultyStore::new(MemStore::new()).with_put_delay(Duration::from_millis(40)));
    let store = store_over(slow);
    let mut t = Trainer::new(workload(2, 30, 4, 2));
    let mut engine = Engine::new(store.clone(), fp32(PolicyKind::FullOnly)).unwrap();
    engine.on_interval_end(&t.model, &mut t.tracker).unwrap();
    // wait until the job holds the run's write slot
    while engine.job_state() != JobState::Writing {
        std::thread::yield_now();
    }
    // the store refuses a concurrent writer for the run
    let draft = common::draft(t.model.config(), CheckpointKind::Full, None, None);
    assert!(matches!(store.begin("run", draft), Err(Error::Conflict(_))));
    engine.on_interval_end(&t.model, &mut t.tracker).unwrap();
    assert_eq!(engine.overruns(), 1);
    let last = engine.join(&mut t.tracker).unwrap().unwrap();
    assert_eq!(last.checkpoint_id, Some(2));
    assert_eq!(engine.job_state(), JobState::Idle);
    assert_eq!(engine.take_reports().len(), 2);
}

#[test]
fn restore_fallback_skips_corrupt_latest() {
    let mem = Arc::new(MemStore::new());
    let store = CheckpointStore::new(mem.clone());
    let mut t = Trainer::new(workload(2, 30, 4, 1));
    let cfg = RunConfig { keep_last: 3, ..fp32(PolicyKind::FullOnly) };
    let mut engine = Engine::new(store.clone(), cfg).unwrap();
    t.interval(&mut engine);
    engine.join(&mut t.tracker).unwrap();
    let first = t.model.clone();
    t.interval(&mut engine);
    engine.join(&mut t.tracker).unwrap();
    let m = store.load_manifest("run", 2).unwrap();
    mem.tamper(&m.shards[0].objects[0].key, |b| b[30] ^= 0xff).unwrap();

    let err = restore(&store, "run", false).unwrap_err();
    assert!(err.is_corruption(), "{err}");
    let r = restore(&store, "run", true).unwrap();
    assert_eq!(r.checkpoint_id, 1);
    assert!(r.model.bit_eq(&first));
}

#[test]
fn restore_without_checkpoint() {
    let (_, store) = mem_store();
    assert!(matches!(restore(&store, "run", true), Err(Error::NoCheckpoint(_))));
}

#[test]
fn payload_bytes_do_not_depend_on_workers_or_chunks() {
    let mut objects = Vec::new();
    for (workers, chunk) in [(1, 1), (3, 5), (8, usize::MAX)] {
        let (mem, store) = mem_store();
        let mut t = Trainer::new(workload(5, 70, 4, 3));
        let cfg = RunConfig {
            workers,
            chunk_rows: chunk,
            quant: QuantSetting::Uniform { method: RangeChoice::Adaptive, bitwidth: Some(BitWidth::B3) },
            ..fp32(PolicyKind::OneShotBaseline)
        };
        let mut engine = Engine::new(store.clone(), cfg).unwrap();
        t.interval(&mut engine);
        t.interval(&mut engine);
        engine.join(&mut t.tracker).unwrap();
        let keys = mem.list("runs/run/ckpt/").unwrap();
        let data: Vec<_> =
            keys.iter().filter(|k| k.ends_with(".bin")).map(|k| (k.clone(), mem.get(k).unwrap())).collect();
        objects.push(data);
    }
    assert!(objects.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn whole_shard_encoder_matches_committed_object() {
    let (mem, store) = mem_store();
    let mut t = Trainer::new(workload(3, 25, 4, 2));
    let mut engine = Engine::new(store.clone(), fp32(PolicyKind::FullOnly)).unwrap();
    t.interval(&mut engine);
    engine.join(&mut t.tracker).unwrap();
    let snap = t.model.snapshot();
    let plan = CheckpointPlan::full(3, None);
    let m = store.load_manifest("run", 1).unwrap();
    for k in 0..2 {
        let expected = encode_shard_whole(&snap, &plan, &embckpt_core::payload::RowCodec::Fp32, k).unwrap();
        assert_eq!(mem.get(&m.shards[k].objects[0].key).unwrap(), expected);
    }
    let plan_rows = CheckpointPlan {
        kind: CheckpointKind::Incremental,
        tables: vec![RowSelection::Rows(vec![1, 5]); 3],
        bitwidth: None,
    };
    let bytes = encode_shard_whole(&snap, &plan_rows, &embckpt_core::payload::RowCodec::Fp32, 0).unwrap();
    let parsed = ShardPayload::parse(&bytes, CheckpointKind::Incremental).unwrap();
    assert_eq!(parsed.sections.len(), 2);
    assert_eq!(parsed.sections[0].rows[1].row_index, 5);
}

#[test]
fn resumed_engine_continues_the_chain() {
    let (_, store) = mem_store();
    let mut t = Trainer::new(workload(2, 60, 4, 1));
    let cfg = fp32(PolicyKind::ConsecutiveIncrement);
    let mut engine = Engine::new(store.clone(), cfg.clone()).unwrap();
    t.interval(&mut engine);
    t.interval(&mut engine);
    engine.join(&mut t.tracker).unwrap();
    drop(engine);

    let r = restore(&store, "run", false).unwrap();
    let mut t2 = Trainer { wl: t.wl.clone(), model: r.model.clone(), tracker: r.tracker.clone() };
    let mut engine = Engine::resume(store.clone(), cfg, &r).unwrap();
    assert!(engine.planner().has_baseline());
    t2.interval(&mut engine);
    let rep = engine.join(&mut t2.tracker).unwrap().unwrap();
    assert_eq!(rep.kind, CheckpointKind::Incremental);
    let m = store.load_manifest("run", rep.checkpoint_id.unwrap()).unwrap();
    assert_eq!(m.parent_id, Some(r.checkpoint_id));
    assert_eq!(store.resolve_chain("run", m.checkpoint_id).unwrap().len(), 3);
    assert!(restore(&store, "run", false).unwrap().model.bit_eq(&t2.model));
}
