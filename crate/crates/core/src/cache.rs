//! TTL-bounded cache-aside layer with LRU capacity eviction, hit/miss
//! accounting and single-flight loading.

use std::collections::HashMap;
use std::fmt;
use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use lru::LruCache;
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{SharedClock, Timestamp};

pub const DEFAULT_CAPACITY: usize = 100_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TtlClass {
    /// Flight search and seat availability.
    Short,
    /// Profiles and sessions.
    Long,
}

impl TtlClass {
    pub fn duration(self) -> Duration {
        match self {
            TtlClass::Short => Duration::from_secs(120),
            TtlClass::Long => Duration::from_secs(3600),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CacheEntry<V> {
    pub key: String,
    pub value: V,
    pub stored_at: Timestamp,
    pub ttl: Duration,
}

impl<V> CacheEntry<V> {
    pub fn is_live(&self, now: Timestamp) -> bool {
        now <= self.stored_at + self.ttl
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    /// `None` until the first lookup.
    pub hit_ratio: Option<f64>,
}

impl CacheStats {
    pub fn from_counts(hits: u64, misses: u64, evictions: u64) -> Self {
        let total = hits + misses;
        CacheStats {
            hits,
            misses,
            evictions,
            hit_ratio: (total > 0).then(|| hits as f64 / total as f64),
        }
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
#[error("cache loader failed: {0}")]
pub struct LoadError(pub String);

struct InFlightLoad<V> {
    result: Mutex<Option<Result<V, LoadError>>>,
    done: Condvar,
    invalidated: AtomicBool,
}

pub struct TtlCache<V> {
    clock: SharedClock,
    entries: Mutex<LruCache<String, CacheEntry<V>>>,
    loading: Mutex<HashMap<String, Arc<InFlightLoad<V>>>>,
    hits: AtomicU64,
    misses: AtomicU64,
    evictions: AtomicU64,
}

impl<V: Clone> fmt::Debug for TtlCache<V> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TtlCache")
            .field("len", &self.entries.lock().len())
            .field("stats", &self.stats())
            .finish()
    }
}

impl<V: Clone> TtlCache<V> {
    pub fn new(clock: SharedClock) -> Self {
        Self::with_capacity(clock, DEFAULT_CAPACITY)
    }

    pub fn with_capacity(clock: SharedClock, capacity: usize) -> Self {
        TtlCache {
            clock,
            entries: Mutex::new(LruCache::new(
                NonZeroUsize::new(capacity.max(1)).expect("nonzero"),
            )),
            loading: Mutex::new(HashMap::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
        }
    }

    pub fn put(&self, key: &str, value: V, ttl: TtlClass) {
        self.put_with_ttl(key, value, ttl.duration());
    }

    pub fn put_with_ttl(&self, key: &str, value: V, ttl: Duration) {
        let entry = CacheEntry {
            key: key.to_string(),
            value,
            stored_at: self.clock.now(),
            ttl,
        };
        let mut entries = self.entries.lock();
        if let Some((old_key, _)) = entries.push(key.to_string(), entry) {
            if old_key != key {
                self.evictions.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    /// Live entry without touching counters or recency.
    pub fn peek_entry(&self, key: &str) -> Option<CacheEntry<V>> {
        let now = self.clock.now();
        self.entries
            .lock()
            .peek(key)
            .filter(|e| e.is_live(now))
            .cloned()
    }

    fn lookup(&self, key: &str) -> Option<V> {
        let now = self.clock.now();
        let mut entries = self.entries.lock();
        match entries.get(key) {
            Some(e) if e.is_live(now) => Some(e.value.clone()),
            Some(_) => {
                entries.pop(key);
                None
            }
            None => None,
        }
    }

    pub fn get(&self, key: &str) -> Option<V> {
        let v = self.lookup(key);
        self.count(v.is_some());
        v
    }

    fn count(&self, hit: bool) {
        if hit {
            self.hits.fetch_add(1, Ordering::Relaxed);
        } else {
            self.misses.fetch_add(1, Ordering::Relaxed);
        }
    }

    /// Cache-aside read. On a miss exactly one caller per key runs `loader`;
    /// concurrent callers for the same key wait for its result. A failed
    /// load caches nothing.
    pub fn get_or_load<E, F>(&self, key: &str, ttl: TtlClass, loader: F) -> Result<V, LoadError>
    where
        E: fmt::Display,
        F: FnOnce() -> Result<V, E>,
    {
        if let Some(v) = self.lookup(key) {
            self.count(true);
            return Ok(v);
        }
        self.count(false);

        let (flight, leader) = {
            let mut loading = self.loading.lock();
            // re-check under the loading lock: a leader may have just finished
            if let Some(v) = self.peek_entry(key) {
                return Ok(v.value);
            }
            match loading.get(key) {
                Some(f) => (f.clone(), false),
                None => {
                    let f = Arc::new(InFlightLoad {
                        result: Mutex::new(None),
                        done: Condvar::new(),
                        invalidated: AtomicBool::new(false),
                    });
                    loading.insert(key.to_string(), f.clone());
                    (f, true)
                }
            }
        };

        if !leader {
            let mut slot = flight.result.lock();
            while slot.is_none() {
                flight.done.wait(&mut slot);
            }
            return slot.clone().expect("set before notify");
        }

        let result = loader().map_err(|e| LoadError(e.to_string()));
        {
            let mut loading = self.loading.lock();
            if let Ok(v) = &result {
                if !flight.invalidated.load(Ordering::SeqCst) {
                    self.put(key, v.clone(), ttl);
                }
            }
            loading.remove(key);
        }
        *flight.result.lock() = Some(result.clone());
        flight.done.notify_all();
        result
    }

    /// Removes `key`. Returns whether a live or expired entry was present.
    pub fn invalidate(&self, key: &str) -> bool {
        if let Some(f) = self.loading.lock().get(key) {
            f.invalidated.store(true, Ordering::SeqCst);
        }
        self.entries.lock().pop(key).is_some()
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats::from_counts(
            self.hits.load(Ordering::Relaxed),
            self.misses.load(Ordering::Relaxed),
            self.evictions.load(Ordering::Relaxed),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
