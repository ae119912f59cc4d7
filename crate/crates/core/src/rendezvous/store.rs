//! Transactional key-value stores.

use std::collections::BTreeMap;
use std::sync::Arc;

use async_trait::async_trait;
use parking_lot::Mutex;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Versioned {
    pub value: Vec<u8>,
    /// Changes on every write to the key; never reused by a store.
    pub version: u64,
}

/// Conditional multi-key write. Commits iff every read condition still holds:
/// `Some(v)` requires the key at version `v`, `None` requires it absent.
/// Writes of `None` delete.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Txn {
    pub reads: Vec<(String, Option<u64>)>,
    pub writes: Vec<(String, Option<Vec<u8>>)>,
}

impl Txn {
    pub fn new() -> Self {
        Txn::default()
    }

    pub fn expect(mut self, key: impl Into<String>, version: Option<u64>) -> Self {
        self.reads.push((key.into(), version));
        self
    }

    pub fn put(mut self, key: impl Into<String>, value: Vec<u8>) -> Self {
        self.writes.push((key.into(), Some(value)));
        self
    }

    pub fn delete(mut self, key: impl Into<String>) -> Self {
        self.writes.push((key.into(), None));
        self
    }
}

#[async_trait]
pub trait KvStore: Send + Sync + 'static {
    async fn get(&self, key: &str) -> Result<Option<Versioned>>;

    /// Atomically check `txn.reads` and apply `txn.writes`. `Ok(false)` means
    /// a condition failed and nothing was written.
    async fn transact(&self, txn: Txn) -> Result<bool>;
}

#[derive(Debug, Clone, Default)]
struct MemState {
    map: BTreeMap<String, Versioned>,
    next_version: u64,
    dead: bool,
}

/// In-process serializable store: every operation runs under one lock.
#[derive(Debug, Default)]
pub struct MemStore {
    state: Mutex<MemState>,
}

impl MemStore {
    pub fn new() -> Arc<Self> {
        Arc::new(MemStore::default())
    }

    /// Independent copy of the current contents.
    pub fn fork(&self) -> MemStore {
        MemStore {
            state: Mutex::new(self.state.lock().clone()),
        }
    }

    /// Make every operation fail with `StoreUnavailable` until [`revive`](Self::revive).
    pub fn kill(&self) {
        self.state.lock().dead = true;
    }

    pub fn revive(&self) {
        self.state.lock().dead = false;
    }

    pub fn snapshot(&self) -> BTreeMap<String, Vec<u8>> {
        self.state
            .lock()
            .map
            .iter()
            .map(|(k, v)| (k.clone(), v.value.clone()))
            .collect()
    }

    pub fn get_sync(&self, key: &str) -> Result<Option<Versioned>> {
        let st = self.state.lock();
        if st.dead {
            return Err(Error::StoreUnavailable);
        }
        Ok(st.map.get(key).cloned())
    }

    pub fn transact_sync(&self, txn: &Txn) -> Result<bool> {
        let mut st = self.state.lock();
        if st.dead {
            return Err(Error::StoreUnavailable);
        }
        let holds = txn
            .reads
            .iter()
            .all(|(k, want)| st.map.get(k).map(|v| v.version) == *want);
        if !holds {
            return Ok(false);
        }
        for (k, w) in &txn.writes {
            match w {
                Some(value) => {
                    st.next_version += 1;
                    let version = st.next_version;
                    st.map.insert(
                        k.clone(),
                        Versioned {
                            value: value.clone(),
                            version,
                        },
                    );
                }
                None => {
                    st.map.remove(k);
                }
            }
        }
        Ok(true)
    }
}

#[async_trait]
impl KvStore for MemStore {
    async fn get(&self, key: &str) -> Result<Option<Versioned>> {
        self.get_sync(key)
    }

    async fn transact(&self, txn: Txn) -> Result<bool> {
        self.transact_sync(&txn)
    }
}

#[async_trait]
impl<S: KvStore + ?Sized> KvStore for Arc<S> {
    async fn get(&self, key: &str) -> Result<Option<Versioned>> {
        (**self).get(key).await
    }

    async fn transact(&self, txn: Txn) -> Result<bool> {
        (**self).transact(txn).await
    }
}
