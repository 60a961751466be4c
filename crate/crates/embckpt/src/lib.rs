//! Checkpoint persistence, background checkpoint engine and the synthetic
//! training simulator built on [`embckpt_core`].
//!
//! * [`store`]: object-store abstraction, local-directory and in-memory
//!   backends, a fault-injecting wrapper, and the manifest-based checkpoint
//!   store (atomic commit, chain resolution, retention).
//! * [`engine`]: stall-and-snapshot at interval boundaries, chunk-pipelined
//!   quantize-and-write on background workers, and restore.
//! * [`sim`]: deterministic Zipf workload, failure injection and metrics.

pub mod engine;
pub mod error;
pub mod sim;
pub mod store;

pub use embckpt_core as core;
pub use error::{Error, Result};
