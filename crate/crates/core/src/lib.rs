//! Allocation-only core of an incremental, quantized checkpointing engine
//! for sparse embedding tables.
//!
//! Everything here is pure computation over in-memory buffers: the sharded
//! model state and its snapshots, dirty-row tracking, per-vector quantization
//! codecs, checkpoint policy decisions and the binary shard payload format.
//! Storage, background execution and the workload simulator live in the
//! `embckpt` crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]

extern crate alloc;

pub mod error;
pub mod model;
pub mod payload;
pub mod policy;
pub mod quant;
pub mod tracker;

pub use error::{Error, Result};
pub use model::{init_model, EmbeddingTable, ModelConfig, ModelSnapshot, ModelState, ReaderState};
pub use policy::{CheckpointKind, CheckpointPlan, PolicyKind};
pub use quant::BitWidth;
pub use tracker::{DirtyBitmap, Scope, Tracker};
