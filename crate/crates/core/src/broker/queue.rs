use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::fmt;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};

use super::{BrokerError, Result};
use crate::clock::Timestamp;

/// Identity of an enqueued message, stable across redeliveries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MessageId(pub u64);

/// Identity of one delivery. Each redelivery gets a fresh tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DeliveryTag(pub u64);

impl fmt::Display for DeliveryTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueueMessage {
    pub queue: String,
    pub message_id: MessageId,
    pub delivery_tag: DeliveryTag,
    pub payload: Vec<u8>,
    pub attempt: u32,
    pub visible_at: Timestamp,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct QueueDepth {
    pub ready: usize,
    pub in_flight: usize,
}

impl QueueDepth {
    pub fn is_empty(&self) -> bool {
        self.ready == 0 && self.in_flight == 0
    }
}

#[derive(Debug)]
struct Stored {
    payload: Vec<u8>,
    deliveries: u32,
}

#[derive(Debug)]
struct InFlight {
    message: MessageId,
    visible_at: Timestamp,
}

#[derive(Debug, Default)]
struct State {
    messages: BTreeMap<MessageId, Stored>,
    ready: BTreeSet<MessageId>,
    in_flight: HashMap<DeliveryTag, InFlight>,
    expiry: BinaryHeap<Reverse<(Timestamp, DeliveryTag)>>,
    generation: u64,
}

impl State {
    fn reclaim_expired(&mut self, now: Timestamp) {
        while let Some(Reverse((at, tag))) = self.expiry.peek().copied() {
            if at > now {
                break;
            }
            self.expiry.pop();
            if let Some(f) = self.in_flight.get(&tag) {
                if f.visible_at == at {
                    let f = self.in_flight.remove(&tag).expect("present");
                    self.ready.insert(f.message);
                }
            }
        }
    }

    fn take_live(&mut self, tag: DeliveryTag, now: Timestamp) -> Result<InFlight> {
        self.reclaim_expired(now);
        self.in_flight.remove(&tag).ok_or(BrokerError::StaleTag(tag))
    }
}

#[derive(Debug)]
pub(super) struct Queue {
    name: String,
    state: Mutex<State>,
    pushed: Condvar,
}

impl Queue {
    pub(super) fn new(name: &str) -> Self {
        Queue {
            name: name.to_string(),
            state: Mutex::new(State::default()),
            pushed: Condvar::new(),
        }
    }

    pub(super) fn push(&self, id: MessageId, payload: &[u8], _now: Timestamp) {
        let mut s = self.state.lock();
        s.messages.insert(
            id,
            Stored {
                payload: payload.to_vec(),
                deliveries: 0,
            },
        );
        s.ready.insert(id);
        s.generation += 1;
        drop(s);
        self.pushed.notify_one();
    }

    pub(super) fn generation(&self) -> u64 {
        self.state.lock().generation
    }

    pub(super) fn wait_for_push(&self, generation: u64, deadline: Instant) -> bool {
        let mut s = self.state.lock();
        if s.generation != generation {
            return true;
        }
        !self.pushed.wait_until(&mut s, deadline).timed_out()
    }

    pub(super) fn receive(
        &self,
        tag: DeliveryTag,
        now: Timestamp,
        visibility_timeout: Duration,
    ) -> Option<QueueMessage> {
        let mut s = self.state.lock();
        s.reclaim_expired(now);
        let id = s.ready.pop_first()?;
        let visible_at = now + visibility_timeout;
        let stored = s.messages.get_mut(&id).expect("ready message is stored");
        stored.deliveries += 1;
        let msg = QueueMessage {
            queue: self.name.clone(),
            message_id: id,
            delivery_tag: tag,
            payload: stored.payload.clone(),
            attempt: stored.deliveries,
            visible_at,
        };
        s.in_flight.insert(tag, InFlight { message: id, visible_at });
        s.expiry.push(Reverse((visible_at, tag)));
        Some(msg)
    }

    pub(super) fn ack(&self, tag: DeliveryTag, now: Timestamp) -> Result<()> {
        let mut s = self.state.lock();
        let f = s.take_live(tag, now)?;
        s.messages.remove(&f.message);
        Ok(())
    }

    pub(super) fn nack(&self, tag: DeliveryTag, now: Timestamp) -> Result<()> {
        let mut s = self.state.lock();
        let f = s.take_live(tag, now)?;
        s.ready.insert(f.message);
        s.generation += 1;
        drop(s);
        self.pushed.notify_one();
        Ok(())
    }

    pub(super) fn depth(&self) -> QueueDepth {
        let s = self.state.lock();
        QueueDepth {
            ready: s.ready.len(),
            in_flight: s.in_flight.len(),
        }
    }

    pub(super) fn next_visible_at(&self) -> Option<Timestamp> {
        let s = self.state.lock();
        s.in_flight.values().map(|f| f.visible_at).min()
    }
}
