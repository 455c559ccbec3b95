//! Notification consumer: turns queue deliveries into notification records.

use std::sync::Arc;
use std::time::Duration;

use serde_json::Value;

use super::model::{NotificationKind, NotificationRecord, NotificationRequest};
use super::ServiceError;
use crate::broker::{Broker, QueueMessage};
use crate::clock::SharedClock;
use crate::store::DocumentStore;

const RECORDS: &str = "notifications";

/// Visibility timeout used by the consumer loop.
pub const NOTIFY_VISIBILITY: Duration = Duration::from_secs(5);

/// What one consumer step did.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Processed {
    /// Queue was empty.
    Idle,
    /// Record written (or already present) and the message acked.
    Acked { booking_id: String, duplicate: bool },
    /// Store failed; the message was nacked for redelivery.
    Nacked { booking_id: String },
    /// Record written but the consumer stopped before acking.
    Crashed { booking_id: String },
    /// Payload could not be decoded; acked and dropped.
    Poison,
}

/// How a delivery should be finished once the record is written.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Finish {
    Ack,
    /// Nack even on success, producing a duplicate delivery.
    Redeliver,
    /// Stop without ack or nack, as if the process died.
    Crash,
}

#[derive(Debug)]
pub struct NotificationService {
    docs: DocumentStore,
    broker: Arc<Broker>,
    clock: SharedClock,
}

fn record_id(booking_id: &str, kind: NotificationKind) -> String {
    format!("{booking_id}:{kind:?}")
}

impl NotificationService {
    pub fn new(broker: Arc<Broker>, clock: SharedClock) -> Self {
        NotificationService {
            docs: DocumentStore::new(),
            broker,
            clock,
        }
    }

    pub fn docs(&self) -> &DocumentStore {
        &self.docs
    }

    /// Receives one message from `queue` and processes it.
    pub fn process_one(&self, queue: &str, finish: Finish) -> Processed {
        match self.broker.receive(queue, NOTIFY_VISIBILITY) {
            Some(msg) => self.handle(queue, msg, finish),
            None => Processed::Idle,
        }
    }

    /// Processes an already received message.
    pub fn handle(&self, queue: &str, msg: QueueMessage, finish: Finish) -> Processed {
        let req: NotificationRequest = match serde_json::from_slice(&msg.payload) {
            Ok(r) => r,
            Err(_) => {
                let _ = self.broker.ack(queue, msg.delivery_tag);
                return Processed::Poison;
            }
        };
        let booking_id = req.booking_id.clone();
        let written = self.write_record(&req);
        // a stale tag only means the visibility window lapsed; the message
        // comes back and the idempotent write absorbs it
        match (written, finish) {
            (Err(_), _) => {
                let _ = self.broker.nack(queue, msg.delivery_tag);
                Processed::Nacked { booking_id }
            }
            (Ok(_), Finish::Crash) => Processed::Crashed { booking_id },
            (Ok(duplicate), Finish::Redeliver) => {
                let _ = self.broker.nack(queue, msg.delivery_tag);
                Processed::Acked { booking_id, duplicate }
            }
            (Ok(duplicate), Finish::Ack) => {
                let _ = self.broker.ack(queue, msg.delivery_tag);
                Processed::Acked { booking_id, duplicate }
            }
        }
    }

    /// Writes the record unless one exists for the same booking and kind.
    /// Returns whether it already existed.
    fn write_record(&self, req: &NotificationRequest) -> Result<bool, ServiceError> {
        let id = record_id(&req.booking_id, req.kind);
        let mut existed = false;
        let rec = NotificationRecord {
            notification_id: id.clone(),
            kind: req.kind,
            booking_id: req.booking_id.clone(),
            sent_ts: self.clock.now().as_nanos(),
        };
        self.docs.update(RECORDS, &id, |doc| {
            if doc.is_some() {
                existed = true;
                return None;
            }
            Some(serde_json::to_value(&rec).expect("record serializes"))
        })?;
        Ok(existed)
    }

    pub fn records_for(&self, booking_id: &str) -> Result<Vec<NotificationRecord>, ServiceError> {
        let all = self.docs.query(RECORDS, &[("booking_id", Value::from(booking_id))])?;
        all.into_iter()
            .map(|v| serde_json::from_value(v).map_err(|e| ServiceError::Corrupt(e.to_string())))
            .collect()
    }

    pub fn all_records(&self) -> Result<Vec<NotificationRecord>, ServiceError> {
        self.docs
            .all(RECORDS)?
            .into_values()
            .map(|v| serde_json::from_value(v).map_err(|e| ServiceError::Corrupt(e.to_string())))
            .collect()
    }
}
