use std::collections::BTreeMap;
use std::io;
use std::sync::{Arc, RwLock};

use super::{check_key, not_found, ObjectStore};

/// In-process store, mainly for tests and simulation.
#[derive(Debug, Default)]
pub struct MemStore {
    objects: RwLock<BTreeMap<String, Arc<Vec<u8>>>>,
}

impl MemStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn total_bytes(&self) -> u64 {
        self.objects.read().unwrap().values().map(|v| v.len() as u64).sum()
    }

    /// Overwrites a stored object in place, bypassing the normal write path.
    /// Used to simulate media corruption.
    pub fn tamper(&self, key: &str, f: impl FnOnce(&mut Vec<u8>)) -> io::Result<()> {
        let mut objects = self.objects.write().unwrap();
        let obj = objects.get_mut(key).ok_or_else(|| not_found(key))?;
        f(Arc::make_mut(obj));
        Ok(())
    }
}

impl ObjectStore for MemStore {
    fn put(&self, key: &str, bytes: &[u8]) -> io::Result<()> {
        check_key(key)?;
        self.objects.write().unwrap().insert(key.to_owned(), Arc::new(bytes.to_vec()));
        Ok(())
    }

    fn get(&self, key: &str) -> io::Result<Vec<u8>> {
        let objects = self.objects.read().unwrap();
        objects.get(key).map(|v| v.as_ref().clone()).ok_or_else(|| not_found(key))
    }

    fn list(&self, prefix: &str) -> io::Result<Vec<String>> {
        let objects = self.objects.read().unwrap();
        Ok(objects
            .range(prefix.to_owned()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, _)| k.clone())
            .collect())
    }

    fn delete(&self, key: &str) -> io::Result<()> {
        self.objects.write().unwrap().remove(key);
        Ok(())
    }

    fn size(&self, key: &str) -> io::Result<u64> {
        let objects = self.objects.read().unwrap();
        objects.get(key).map(|v| v.len() as u64).ok_or_else(|| not_found(key))
    }
}
