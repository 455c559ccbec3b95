use std::sync::Arc;
use std::time::Instant;

use parking_lot::{Condvar, Mutex};

use crate::clock::Timestamp;

/// One immutable record of a topic partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventRecord {
    pub topic: String,
    pub partition: u32,
    pub offset: u64,
    pub key: Vec<u8>,
    pub payload: Vec<u8>,
    pub publish_ts: Timestamp,
    pub correlation_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopicInfo {
    pub name: String,
    pub partitions: u32,
}

#[derive(Debug)]
pub(super) struct Topic {
    name: String,
    partitions: Vec<Mutex<Vec<Arc<EventRecord>>>>,
    appended: Mutex<u64>,
    appended_cv: Condvar,
}

impl Topic {
    pub(super) fn new(name: &str, partitions: u32) -> Self {
        Topic {
            name: name.to_string(),
            partitions: (0..partitions).map(|_| Mutex::new(Vec::new())).collect(),
            appended: Mutex::new(0),
            appended_cv: Condvar::new(),
        }
    }

    pub(super) fn name(&self) -> &str {
        &self.name
    }

    pub(super) fn info(&self) -> TopicInfo {
        TopicInfo {
            name: self.name.clone(),
            partitions: self.partition_count(),
        }
    }

    pub(super) fn partition_count(&self) -> u32 {
        self.partitions.len() as u32
    }

    pub(super) fn append(
        &self,
        partition: u32,
        key: &[u8],
        payload: &[u8],
        correlation_id: &str,
        now: impl FnOnce() -> Timestamp,
    ) -> u64 {
        let offset = {
            let mut log = self.partitions[partition as usize].lock();
            let offset = log.len() as u64;
            // stamped under the partition lock so publish_ts is non-decreasing
            let ts = now().max(log.last().map_or(Timestamp::ZERO, |r| r.publish_ts));
            log.push(Arc::new(EventRecord {
                topic: self.name.clone(),
                partition,
                offset,
                key: key.to_vec(),
                payload: payload.to_vec(),
                publish_ts: ts,
                correlation_id: correlation_id.to_string(),
            }));
            offset
        };
        *self.appended.lock() += 1;
        self.appended_cv.notify_all();
        offset
    }

    pub(super) fn log_end(&self, partition: u32) -> Option<u64> {
        self.partitions
            .get(partition as usize)
            .map(|p| p.lock().len() as u64)
    }

    pub(super) fn generation(&self) -> u64 {
        *self.appended.lock()
    }

    /// Waits until something is appended after `generation` or the deadline
    /// passes. Returns false on timeout.
    pub(super) fn wait_for_append(&self, generation: u64, deadline: Instant) -> bool {
        let mut g = self.appended.lock();
        while *g == generation {
            if self.appended_cv.wait_until(&mut g, deadline).timed_out() {
                return *g != generation;
            }
        }
        true
    }

    pub(super) fn read_partition(&self, partition: u32, from: u64) -> Vec<Arc<EventRecord>> {
        match self.partitions.get(partition as usize) {
            Some(p) => p.lock().iter().skip(from as usize).cloned().collect(),
            None => Vec::new(),
        }
    }

    pub(super) fn read_after(&self, committed: &[Option<u64>], max: usize) -> Vec<Arc<EventRecord>> {
        let pending: Vec<Vec<Arc<EventRecord>>> = self
            .partitions
            .iter()
            .enumerate()
            .map(|(p, log)| {
                let start = committed.get(p).copied().flatten().map_or(0, |c| c + 1) as usize;
                let log = log.lock();
                log.iter().skip(start).take(max).cloned().collect()
            })
            .collect();
        let mut out = Vec::with_capacity(max.min(pending.iter().map(Vec::len).sum()));
        let mut cursors = vec![0usize; pending.len()];
        while out.len() < max {
            let mut progressed = false;
            for (p, recs) in pending.iter().enumerate() {
                if out.len() == max {
                    break;
                }
                if let Some(r) = recs.get(cursors[p]) {
                    out.push(r.clone());
                    cursors[p] += 1;
                    progressed = true;
                }
            }
            if !progressed {
                break;
            }
        }
        out
    }
}
