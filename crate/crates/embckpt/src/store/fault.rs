use std::collections::BTreeMap;
use std::io;
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use super::ObjectStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// The operation fails without effect; later operations work.
    Error,
    /// The process dies before the operation takes effect; every later
    /// operation fails too.
    Crash,
    /// The operation takes effect, then the process dies before seeing the
    /// acknowledgement.
    CrashAfter,
}

#[derive(Debug, Default)]
struct State {
    mutations: u64,
    faults: BTreeMap<u64, Fault>,
    crashed: bool,
    put_delay: Duration,
}

/// Wraps a store and injects faults at chosen mutating operations (`put` and
/// `delete`, counted from 0).
#[derive(Debug)]
pub struct FaultyStore<S> {
    inner: S,
    state: Mutex<State>,
}

fn injected(what: &str) -> io::Error {
    io::Error::other(format!("injected fault: {what}"))
}

impl<S: ObjectStore> FaultyStore<S> {
    pub fn new(inner: S) -> Self {
        FaultyStore { inner, state: Mutex::new(State::default()) }
    }

    /// Schedules `fault` for the mutation with index `n`.
    pub fn fail_mutation(self, n: u64, fault: Fault) -> Self {
        self.state.lock().unwrap().faults.insert(n, fault);
        self
    }

    /// Like [`fail_mutation`](Self::fail_mutation), on a shared store.
    pub fn inject(&self, n: u64, fault: Fault) {
        self.state.lock().unwrap().faults.insert(n, fault);
    }

    /// Sleeps this long inside every `put`, to emulate slow storage.
    pub fn with_put_delay(self, delay: Duration) -> Self {
        self.state.lock().unwrap().put_delay = delay;
        self
    }

    pub fn mutations(&self) -> u64 {
        self.state.lock().unwrap().mutations
    }

    pub fn crashed(&self) -> bool {
        self.state.lock().unwrap().crashed
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }

    pub fn into_inner(self) -> S {
        self.inner
    }

    fn check_alive(&self) -> io::Result<()> {
        if self.state.lock().unwrap().crashed {
            Err(injected("store unavailable after crash"))
        } else {
            Ok(())
        }
    }

    fn mutate(&self, op: impl FnOnce() -> io::Result<()>) -> io::Result<()> {
        let fault = {
            let mut st = self.state.lock().unwrap();
            if st.crashed {
                return Err(injected("store unavailable after crash"));
            }
            let n = st.mutations;
            st.mutations += 1;
            let fault = st.faults.get(&n).copied();
            if matches!(fault, Some(Fault::Crash | Fault::CrashAfter)) {
                st.crashed = true;
            }
            fault
        };
        match fault {
            None => op(),
            Some(Fault::Error) => Err(injected("write error")),
            Some(Fault::Crash) => Err(injected("crash")),
            Some(Fault::CrashAfter) => {
                op()?;
                Err(injected("crash after write"))
            }
        }
    }
}

impl<S: ObjectStore> ObjectStore for FaultyStore<S> {
    fn put(&self, key: &str, bytes: &[u8]) -> io::Result<()> {
        let delay = self.state.lock().unwrap().put_delay;
        if !delay.is_zero() {
            thread::sleep(delay);
        }
        self.mutate(|| self.inner.put(key, bytes))
    }

    fn get(&self, key: &str) -> io::Result<Vec<u8>> {
        self.check_alive()?;
        self.inner.get(key)
    }

    fn list(&self, prefix: &str) -> io::Result<Vec<String>> {
        self.check_alive()?;
        self.inner.list(prefix)
    }

    fn delete(&self, key: &str) -> io::Result<()> {
        self.mutate(|| self.inner.delete(key))
    }

    fn size(&self, key: &str) -> io::Result<u64> {
        self.check_alive()?;
        self.inner.size(key)
    }
}
