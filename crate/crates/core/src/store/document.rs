use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use parking_lot::RwLock;
use serde_json::{json, Value};

use super::{digest_lines, write_lines, StoreError};

/// Schemaless JSON document store. Collections are created on first write.
#[derive(Debug, Default)]
pub struct DocumentStore {
    collections: RwLock<BTreeMap<String, BTreeMap<String, Value>>>,
    queries: AtomicU64,
    unavailable: AtomicBool,
}

fn lookup<'a>(doc: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(doc, |v, seg| v.get(seg))
}

impl DocumentStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Makes every subsequent operation fail with `Unavailable` until reset.
    pub fn set_unavailable(&self, down: bool) {
        self.unavailable.store(down, Ordering::SeqCst);
    }

    fn check(&self) -> Result<(), StoreError> {
        if self.unavailable.load(Ordering::SeqCst) {
            Err(StoreError::Unavailable)
        } else {
            Ok(())
        }
    }

    /// Replaces the whole document. Only JSON objects are accepted.
    pub fn put(&self, collection: &str, id: &str, doc: Value) -> Result<(), StoreError> {
        self.check()?;
        if !doc.is_object() {
            return Err(StoreError::Rejected(format!(
                "{collection}/{id}: documents must be JSON objects"
            )));
        }
        if id.is_empty() {
            return Err(StoreError::Rejected(format!("{collection}: empty document id")));
        }
        self.collections
            .write()
            .entry(collection.to_string())
            .or_default()
            .insert(id.to_string(), doc);
        Ok(())
    }

    pub fn get(&self, collection: &str, id: &str) -> Result<Option<Value>, StoreError> {
        self.check()?;
        Ok(self
            .collections
            .read()
            .get(collection)
            .and_then(|c| c.get(id))
            .cloned())
    }

    /// Atomic read-modify-write. `f` receives the current document (if any)
    /// and returns the replacement, or `None` to leave it untouched.
    pub fn update<F>(&self, collection: &str, id: &str, f: F) -> Result<bool, StoreError>
    where
        F: FnOnce(Option<&Value>) -> Option<Value>,
    {
        self.check()?;
        let mut cols = self.collections.write();
        let col = cols.entry(collection.to_string()).or_default();
        match f(col.get(id)) {
            Some(doc) if doc.is_object() => {
                col.insert(id.to_string(), doc);
                Ok(true)
            }
            Some(_) => Err(StoreError::Rejected(format!(
                "{collection}/{id}: documents must be JSON objects"
            ))),
            None => Ok(false),
        }
    }

    pub fn delete(&self, collection: &str, id: &str) -> Result<bool, StoreError> {
        self.check()?;
        Ok(self
            .collections
            .write()
            .get_mut(collection)
            .is_some_and(|c| c.remove(id).is_some()))
    }

    /// All documents whose fields equal every `(path, value)` pair, in id
    /// order. Paths may use dots to reach nested fields.
    pub fn query(&self, collection: &str, filter: &[(&str, Value)]) -> Result<Vec<Value>, StoreError> {
        self.check()?;
        self.queries.fetch_add(1, Ordering::Relaxed);
        let cols = self.collections.read();
        Ok(cols
            .get(collection)
            .map(|c| {
                c.values()
                    .filter(|d| filter.iter().all(|(p, v)| lookup(d, p) == Some(v)))
                    .cloned()
                    .collect()
            })
            .unwrap_or_default())
    }

    /// Every document of a collection keyed by id.
    pub fn all(&self, collection: &str) -> Result<BTreeMap<String, Value>, StoreError> {
        self.check()?;
        Ok(self
            .collections
            .read()
            .get(collection)
            .cloned()
            .unwrap_or_default())
    }

    /// Number of `query` calls so far.
    pub fn query_count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    pub fn len(&self, collection: &str) -> usize {
        self.collections.read().get(collection).map_or(0, |c| c.len())
    }

    fn canonical_lines(&self) -> Vec<String> {
        let cols = self.collections.read();
        cols.iter()
            .flat_map(|(name, docs)| {
                docs.iter()
                    .map(move |(id, doc)| json!({"collection": name, "id": id, "doc": doc}).to_string())
            })
            .collect()
    }

    pub fn snapshot_digest(&self) -> String {
        digest_lines(self.canonical_lines())
    }

    /// JSON-lines snapshot, one document per line in collection/id order.
    pub fn write_snapshot(&self, path: &Path) -> std::io::Result<()> {
        write_lines(path, self.canonical_lines())
    }
}
