//! Embedded dual-mode messaging.
//!
//! Topics are append-only partitioned logs read by independent consumer
//! groups (streaming role). Queues hand each message to one consumer at a
//! time under a visibility timeout and keep redelivering until it is acked
//! (guaranteed-delivery role).

mod log;
mod queue;

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use parking_lot::{Mutex, RwLock};
use serde::Serialize;
use thiserror::Error;

use crate::clock::{SharedClock, Timestamp};

pub use log::{EventRecord, TopicInfo};
pub use queue::{DeliveryTag, MessageId, QueueDepth, QueueMessage};

use log::Topic;
use queue::Queue;

pub const DEFAULT_PARTITIONS: u32 = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BrokerError {
    #[error("topic {0} already exists")]
    AlreadyExists(String),
    #[error("topic {0} not found")]
    NotFound(String),
    #[error("a topic needs at least one partition")]
    InvalidPartitions,
    #[error("offset {offset} out of range for {topic}/{partition} (log end {log_end})")]
    OutOfRange {
        topic: String,
        partition: u32,
        offset: u64,
        log_end: u64,
    },
    #[error("delivery tag {0} is unknown or expired")]
    StaleTag(DeliveryTag),
}

pub type Result<T> = std::result::Result<T, BrokerError>;

/// 64-bit FNV-1a.
pub fn hash64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes
        .iter()
        .fold(OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(PRIME))
}

pub fn partition_for(key: &[u8], partitions: u32) -> u32 {
    (hash64(key) % u64::from(partitions)) as u32
}

type GroupKey = (String, String);

#[derive(Debug)]
pub struct Broker {
    clock: SharedClock,
    topics: RwLock<BTreeMap<String, Arc<Topic>>>,
    // (group, topic) -> committed offset per partition
    groups: Mutex<HashMap<GroupKey, Vec<Option<u64>>>>,
    queues: RwLock<BTreeMap<String, Arc<Queue>>>,
    next_tag: AtomicU64,
    next_message: AtomicU64,
    published: AtomicU64,
}

impl Broker {
    pub fn new(clock: SharedClock) -> Self {
        Broker {
            clock,
            topics: RwLock::new(BTreeMap::new()),
            groups: Mutex::new(HashMap::new()),
            queues: RwLock::new(BTreeMap::new()),
            next_tag: AtomicU64::new(1),
            next_message: AtomicU64::new(1),
            published: AtomicU64::new(0),
        }
    }

    pub fn clock(&self) -> &SharedClock {
        &self.clock
    }

    pub fn create_topic(&self, name: &str, partitions: u32) -> Result<TopicInfo> {
        if partitions == 0 {
            return Err(BrokerError::InvalidPartitions);
        }
        let mut topics = self.topics.write();
        if topics.contains_key(name) {
            return Err(BrokerError::AlreadyExists(name.to_string()));
        }
        let topic = Arc::new(Topic::new(name, partitions));
        let info = topic.info();
        topics.insert(name.to_string(), topic);
        Ok(info)
    }

    fn topic(&self, name: &str) -> Result<Arc<Topic>> {
        self.topics
            .read()
            .get(name)
            .cloned()
            .ok_or_else(|| BrokerError::NotFound(name.to_string()))
    }

    pub fn topic_info(&self, name: &str) -> Result<TopicInfo> {
        Ok(self.topic(name)?.info())
    }

    pub fn topic_names(&self) -> Vec<String> {
        self.topics.read().keys().cloned().collect()
    }

    pub fn publish(&self, topic: &str, key: &[u8], payload: &[u8]) -> Result<(u32, u64)> {
        self.publish_with_correlation(topic, key, payload, "")
    }

    pub fn publish_with_correlation(
        &self,
        topic: &str,
        key: &[u8],
        payload: &[u8],
        correlation_id: &str,
    ) -> Result<(u32, u64)> {
        let topic = self.topic(topic)?;
        let partition = partition_for(key, topic.partition_count());
        let offset = topic.append(
            partition,
            key,
            payload,
            correlation_id,
            || self.clock.now(),
        );
        self.published.fetch_add(1, Ordering::Relaxed);
        Ok((partition, offset))
    }

    /// Total records ever appended across all topics.
    pub fn published_count(&self) -> u64 {
        self.published.load(Ordering::Relaxed)
    }

    fn committed_positions(&self, group: &str, topic: &Topic) -> Vec<Option<u64>> {
        self.groups
            .lock()
            .get(&(group.to_string(), topic.name().to_string()))
            .cloned()
            .unwrap_or_else(|| vec![None; topic.partition_count() as usize])
    }

    /// Returns up to `max` records after the group's committed offsets,
    /// interleaving partitions round-robin while keeping per-partition order.
    /// Polling does not move the group forward; only [`Broker::commit`] does.
    pub fn poll(
        &self,
        topic: &str,
        group: &str,
        max: usize,
        timeout: Duration,
    ) -> Result<Vec<Arc<EventRecord>>> {
        let topic = self.topic(topic)?;
        let deadline = std::time::Instant::now() + timeout;
        loop {
            let generation = topic.generation();
            let committed = self.committed_positions(group, &topic);
            let records = topic.read_after(&committed, max);
            if !records.is_empty() || timeout.is_zero() || self.clock.is_virtual() {
                return Ok(records);
            }
            if !topic.wait_for_append(generation, deadline) {
                return Ok(topic.read_after(&self.committed_positions(group, &topic), max));
            }
        }
    }

    /// Marks `offset` as processed; the next poll starts at `offset + 1`.
    pub fn commit(&self, group: &str, topic: &str, partition: u32, offset: u64) -> Result<()> {
        let t = self.topic(topic)?;
        let log_end = t.log_end(partition);
        let out_of_range = || BrokerError::OutOfRange {
            topic: topic.to_string(),
            partition,
            offset,
            log_end: log_end.unwrap_or(0),
        };
        match log_end {
            Some(end) if offset < end => {}
            _ => return Err(out_of_range()),
        }
        let mut groups = self.groups.lock();
        let positions = groups
            .entry((group.to_string(), topic.to_string()))
            .or_insert_with(|| vec![None; t.partition_count() as usize]);
        positions[partition as usize] = Some(offset);
        Ok(())
    }

    /// Commits the highest offset per partition found in `records`.
    pub fn commit_records(&self, group: &str, records: &[Arc<EventRecord>]) -> Result<()> {
        let mut high: BTreeMap<(&str, u32), u64> = BTreeMap::new();
        for r in records {
            let e = high.entry((r.topic.as_str(), r.partition)).or_insert(r.offset);
            *e = (*e).max(r.offset);
        }
        for ((topic, partition), offset) in high {
            self.commit(group, topic, partition, offset)?;
        }
        Ok(())
    }

    pub fn committed(&self, group: &str, topic: &str, partition: u32) -> Option<u64> {
        self.groups
            .lock()
            .get(&(group.to_string(), topic.to_string()))
            .and_then(|p| p.get(partition as usize).copied().flatten())
    }

    /// Number of records appended to a partition (the next offset to assign).
    pub fn log_end(&self, topic: &str, partition: u32) -> Result<u64> {
        let t = self.topic(topic)?;
        t.log_end(partition).ok_or_else(|| BrokerError::OutOfRange {
            topic: topic.to_string(),
            partition,
            offset: 0,
            log_end: 0,
        })
    }

    /// Records not yet committed by `group` on `topic`.
    pub fn lag(&self, group: &str, topic: &str) -> Result<u64> {
        let t = self.topic(topic)?;
        let committed = self.committed_positions(group, &t);
        Ok((0..t.partition_count())
            .map(|p| {
                let end = t.log_end(p).unwrap_or(0);
                let next = committed[p as usize].map_or(0, |c| c + 1);
                end.saturating_sub(next)
            })
            .sum())
    }

    /// Records of one partition starting at `from`.
    pub fn read_partition(&self, topic: &str, partition: u32, from: u64) -> Result<Vec<Arc<EventRecord>>> {
        let t = self.topic(topic)?;
        Ok(t.read_partition(partition, from))
    }

    /// Writes every record of `topic` as one JSON object per line.
    pub fn dump_ndjson<W: Write>(&self, topic: &str, mut out: W) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            topic: &'a str,
            partition: u32,
            offset: u64,
            key: String,
            payload_b64: String,
            publish_ts_ns: u64,
        }
        let t = self
            .topic(topic)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::NotFound, e))?;
        for p in 0..t.partition_count() {
            for r in t.read_partition(p, 0) {
                let line = Line {
                    topic: &r.topic,
                    partition: r.partition,
                    offset: r.offset,
                    key: String::from_utf8_lossy(&r.key).into_owned(),
                    payload_b64: B64.encode(&r.payload),
                    publish_ts_ns: r.publish_ts.as_nanos(),
                };
                serde_json::to_writer(&mut out, &line)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    fn queue(&self, name: &str) -> Arc<Queue> {
        if let Some(q) = self.queues.read().get(name) {
            return q.clone();
        }
        self.queues
            .write()
            .entry(name.to_string())
            .or_insert_with(|| Arc::new(Queue::new(name)))
            .clone()
    }

    /// Declares an empty queue. Queues are also declared on first use.
    pub fn declare_queue(&self, name: &str) {
        self.queue(name);
    }

    /// Declares the queue on first use and stores the message, visible
    /// immediately.
    pub fn enqueue(&self, queue: &str, payload: &[u8]) -> MessageId {
        let id = MessageId(self.next_message.fetch_add(1, Ordering::Relaxed));
        self.queue(queue).push(id, payload, self.clock.now());
        id
    }

    /// Hands out the oldest visible message and hides it until
    /// `now + visibility_timeout`.
    pub fn receive(&self, queue: &str, visibility_timeout: Duration) -> Option<QueueMessage> {
        let tag = DeliveryTag(self.next_tag.fetch_add(1, Ordering::Relaxed));
        self.queue(queue).receive(tag, self.clock.now(), visibility_timeout)
    }

    /// Like [`Broker::receive`] but waits up to `wait` (real clock only).
    pub fn receive_wait(
        &self,
        queue: &str,
        visibility_timeout: Duration,
        wait: Duration,
    ) -> Option<QueueMessage> {
        let q = self.queue(queue);
        let deadline = std::time::Instant::now() + wait;
        loop {
            let generation = q.generation();
            let tag = DeliveryTag(self.next_tag.fetch_add(1, Ordering::Relaxed));
            if let Some(m) = q.receive(tag, self.clock.now(), visibility_timeout) {
                return Some(m);
            }
            if wait.is_zero() || self.clock.is_virtual() {
                return None;
            }
            // Hidden messages may reappear without a push, so wake periodically.
            let slice = (std::time::Instant::now() + Duration::from_millis(20)).min(deadline);
            if !q.wait_for_push(generation, slice) && std::time::Instant::now() >= deadline {
                return None;
            }
        }
    }

    pub fn ack(&self, queue: &str, tag: DeliveryTag) -> Result<()> {
        self.queue(queue).ack(tag, self.clock.now())
    }

    /// Returns the message to the queue, visible immediately.
    pub fn nack(&self, queue: &str, tag: DeliveryTag) -> Result<()> {
        self.queue(queue).nack(tag, self.clock.now())
    }

    pub fn queue_depth(&self, queue: &str) -> QueueDepth {
        self.queue(queue).depth()
    }

    pub fn queue_names(&self) -> Vec<String> {
        self.queues.read().keys().cloned().collect()
    }

    /// Earliest time a hidden message in any queue becomes visible again.
    pub fn next_redelivery(&self) -> Option<Timestamp> {
        self.queues
            .read()
            .values()
            .filter_map(|q| q.next_visible_at())
            .min()
    }
}
