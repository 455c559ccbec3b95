use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use parking_lot::RwLock;
use serde::Serialize;
use serde_json::{json, Value};

use super::{digest_lines, write_lines, StoreError};

/// Retries services allow on `Conflict` before giving up.
pub const DEFAULT_TXN_RETRIES: usize = 10;

#[derive(Debug)]
struct Slot {
    // None marks a deleted key; the version still moves so readers of the
    // old value conflict.
    value: Option<Value>,
    version: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CommitRecord {
    pub seq: u64,
    pub txn_id: u64,
    pub keys: Vec<String>,
}

#[derive(Debug, Default)]
struct Committed {
    data: BTreeMap<String, Slot>,
    seq: u64,
    journal: Vec<CommitRecord>,
}

impl Committed {
    fn version(&self, key: &str) -> u64 {
        self.data.get(key).map_or(0, |s| s.version)
    }

    fn value(&self, key: &str) -> Option<&Value> {
        self.data.get(key).and_then(|s| s.value.as_ref())
    }
}

/// Key-value store with optimistic multi-key transactions.
#[derive(Debug, Default)]
pub struct TxnStore {
    committed: RwLock<Committed>,
    next_txn: AtomicU64,
}

/// A live transaction. Writes are buffered and invisible to everyone else
/// until [`Txn::commit`]; both `commit` and `abort` consume the handle.
#[derive(Debug)]
pub struct Txn<'s> {
    store: &'s TxnStore,
    id: u64,
    reads: BTreeMap<String, u64>,
    writes: BTreeMap<String, Option<Value>>,
}

impl<'s> Txn<'s> {
    pub fn id(&self) -> u64 {
        self.id
    }

    /// Reads observe this transaction's own buffered writes first.
    pub fn get(&mut self, key: &str) -> Option<Value> {
        if let Some(w) = self.writes.get(key) {
            return w.clone();
        }
        let c = self.store.committed.read();
        self.reads.entry(key.to_string()).or_insert_with(|| c.version(key));
        c.value(key).cloned()
    }

    pub fn set(&mut self, key: &str, value: Value) {
        self.writes.insert(key.to_string(), Some(value));
    }

    pub fn delete(&mut self, key: &str) {
        self.writes.insert(key.to_string(), None);
    }

    /// Applies the write set iff no key in the read set was committed by
    /// someone else since it was read. Returns the commit sequence number.
    pub fn commit(self) -> Result<u64, StoreError> {
        let mut c = self.store.committed.write();
        if self.reads.iter().any(|(k, v)| c.version(k) != *v) {
            return Err(StoreError::Conflict(self.id));
        }
        if self.writes.is_empty() {
            return Ok(c.seq);
        }
        c.seq += 1;
        let seq = c.seq;
        let keys: Vec<String> = self.writes.keys().cloned().collect();
        for (k, v) in self.writes {
            c.data.insert(k, Slot { value: v, version: seq });
        }
        c.journal.push(CommitRecord {
            seq,
            txn_id: self.id,
            keys,
        });
        Ok(seq)
    }

    pub fn abort(self) {}
}

impl TxnStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn begin(&self) -> Txn<'_> {
        Txn {
            store: self,
            id: self.next_txn.fetch_add(1, Ordering::Relaxed) + 1,
            reads: BTreeMap::new(),
            writes: BTreeMap::new(),
        }
    }

    /// Runs `body` in a fresh transaction and commits, retrying on conflict
    /// up to `retries` extra times.
    pub fn transact<T, E, F>(&self, retries: usize, mut body: F) -> Result<T, E>
    where
        E: From<StoreError>,
        F: FnMut(&mut Txn<'_>) -> Result<T, E>,
    {
        let mut attempt = 0;
        loop {
            let mut txn = self.begin();
            let out = body(&mut txn)?;
            match txn.commit() {
                Ok(_) => return Ok(out),
                Err(StoreError::Conflict(_)) if attempt < retries => attempt += 1,
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Committed value, outside any transaction.
    pub fn get(&self, key: &str) -> Option<Value> {
        self.committed.read().value(key).cloned()
    }

    /// Committed entries whose key starts with `prefix`, in key order, read
    /// from one consistent snapshot.
    pub fn scan_prefix(&self, prefix: &str) -> Vec<(String, Value)> {
        let c = self.committed.read();
        c.data
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .filter_map(|(k, s)| s.value.clone().map(|v| (k.clone(), v)))
            .collect()
    }

    /// Several prefixes read under a single snapshot.
    pub fn scan_prefixes(&self, prefixes: &[&str]) -> Vec<Vec<(String, Value)>> {
        let c = self.committed.read();
        prefixes
            .iter()
            .map(|prefix| {
                c.data
                    .range(prefix.to_string()..)
                    .take_while(|(k, _)| k.starts_with(prefix))
                    .filter_map(|(k, s)| s.value.clone().map(|v| (k.clone(), v)))
                    .collect()
            })
            .collect()
    }

    pub fn commit_seq(&self) -> u64 {
        self.committed.read().seq
    }

    pub fn journal(&self) -> Vec<CommitRecord> {
        self.committed.read().journal.clone()
    }

    fn canonical_lines(&self) -> Vec<String> {
        self.committed
            .read()
            .data
            .iter()
            .filter_map(|(k, s)| s.value.as_ref().map(|v| json!({"key": k, "value": v}).to_string()))
            .collect()
    }

    pub fn snapshot_digest(&self) -> String {
        digest_lines(self.canonical_lines())
    }

    pub fn write_snapshot(&self, path: &Path) -> std::io::Result<()> {
        write_lines(path, self.canonical_lines())
    }
}
