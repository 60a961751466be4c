//! Object storage for checkpoints.
//!
//! [`ObjectStore`] is the minimal interface the checkpoint layer needs: an
//! atomic whole-object `put`, `get`, prefix `list`, and idempotent `delete`.
//! Keys are `/`-separated relative paths.

mod checkpoint;
mod fault;
mod local;
mod manifest;
mod mem;

use std::fmt;
use std::io;
use std::sync::Arc;

pub use checkpoint::{
    ckpt_prefix, manifest_key, pending_prefix, CheckpointStore, ManifestDraft, WriteHandle,
};
pub use fault::{Fault, FaultyStore};
pub use local::LocalDirStore;
pub use manifest::{CheckpointManifest, ObjectEntry, ShardEntry, TableEntry, FORMAT_VERSION};
pub use mem::MemStore;

pub trait ObjectStore: Send + Sync + fmt::Debug {
    /// Stores `bytes` under `key`. Readers observe either the old object or
    /// the complete new one.
    fn put(&self, key: &str, bytes: &[u8]) -> io::Result<()>;

    /// Fails with [`io::ErrorKind::NotFound`] for a missing key.
    fn get(&self, key: &str) -> io::Result<Vec<u8>>;

    /// All keys starting with `prefix`, sorted.
    fn list(&self, prefix: &str) -> io::Result<Vec<String>>;

    /// Removing a missing key succeeds.
    fn delete(&self, key: &str) -> io::Result<()>;

    fn size(&self, key: &str) -> io::Result<u64> {
        self.get(key).map(|b| b.len() as u64)
    }
}

impl<T: ObjectStore + ?Sized> ObjectStore for Arc<T> {
    fn put(&self, key: &str, bytes: &[u8]) -> io::Result<()> {
        (**self).put(key, bytes)
    }
    fn get(&self, key: &str) -> io::Result<Vec<u8>> {
        (**self).get(key)
    }
    fn list(&self, prefix: &str) -> io::Result<Vec<String>> {
        (**self).list(prefix)
    }
    fn delete(&self, key: &str) -> io::Result<()> {
        (**self).delete(key)
    }
    fn size(&self, key: &str) -> io::Result<u64> {
        (**self).size(key)
    }
}

impl<T: ObjectStore + ?Sized> ObjectStore for Box<T> {
    fn put(&self, key: &str, bytes: &[u8]) -> io::Result<()> {
        (**self).put(key, bytes)
    }
    fn get(&self, key: &str) -> io::Result<Vec<u8>> {
        (**self).get(key)
    }
    fn list(&self, prefix: &str) -> io::Result<Vec<String>> {
        (**self).list(prefix)
    }
    fn delete(&self, key: &str) -> io::Result<()> {
        (**self).delete(key)
    }
    fn size(&self, key: &str) -> io::Result<u64> {
        (**self).size(key)
    }
}

/// Rejects keys that could escape a store root or alias another key.
pub(crate) fn check_key(key: &str) -> io::Result<()> {
    let ok = !key.is_empty()
        && !key.starts_with('/')
        && !key.contains('\\')
        && key.split('/').all(|c| !c.is_empty() && c != "." && c != "..");
    if ok {
        Ok(())
    } else {
        Err(io::Error::new(io::ErrorKind::InvalidInput, format!("invalid object key `{key}`")))
    }
}

pub(crate) fn not_found(key: &str) -> io::Error {
    io::Error::new(io::ErrorKind::NotFound, format!("no object `{key}`"))
}
