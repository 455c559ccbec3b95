//! Topic consumers that keep the read models up to date.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;

use super::model::DomainEvent;
use super::{ServiceError, Testbed, TOPIC_BOOKINGS, TOPIC_INVENTORY, TOPIC_PAYMENTS};
use crate::broker::EventRecord;

/// The four consumer groups and what each one feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Projection {
    TripView,
    Loyalty,
    SearchIndex,
    PaymentLedger,
}

impl Projection {
    pub const ALL: [Projection; 4] = [
        Projection::TripView,
        Projection::Loyalty,
        Projection::SearchIndex,
        Projection::PaymentLedger,
    ];

    pub fn group(self) -> &'static str {
        match self {
            Projection::TripView => "trip-view",
            Projection::Loyalty => "loyalty",
            Projection::SearchIndex => "search-index",
            Projection::PaymentLedger => "payment-ledger",
        }
    }

    pub fn topic(self) -> &'static str {
        match self {
            Projection::TripView | Projection::Loyalty => TOPIC_BOOKINGS,
            Projection::SearchIndex => TOPIC_INVENTORY,
            Projection::PaymentLedger => TOPIC_PAYMENTS,
        }
    }

    pub fn apply(self, tb: &Testbed, event: &DomainEvent) -> Result<(), ServiceError> {
        match self {
            Projection::TripView => tb.profiles.apply_trip_event(event),
            Projection::Loyalty => tb.profiles.apply_loyalty_event(event),
            Projection::SearchIndex => tb.flights.apply_inventory_event(event),
            Projection::PaymentLedger => tb.profiles.apply_payment_event(event),
        }
    }
}

/// One applied record, reported to the caller's observer.
#[derive(Clone, Debug)]
pub struct Applied {
    pub record: Arc<EventRecord>,
    /// False when the record had been applied before (a replay).
    pub first_time: bool,
}

/// Options for one consumer step.
pub struct StepOptions<'a> {
    pub max: usize,
    pub wait: Duration,
    /// Records for which this returns false are held back, along with
    /// everything after them in the same partition.
    pub deliverable: &'a dyn Fn(&EventRecord) -> bool,
    /// Skip the commit, so the batch is delivered again.
    pub skip_commit: bool,
}

/// Consumer-group worker for one projection. Remembers how far it has
/// applied so replays can be told apart from new records.
#[derive(Debug)]
pub struct TopicConsumer {
    pub projection: Projection,
    applied_upto: Mutex<BTreeMap<u32, u64>>,
}

impl TopicConsumer {
    pub fn new(projection: Projection) -> Self {
        TopicConsumer {
            projection,
            applied_upto: Mutex::new(BTreeMap::new()),
        }
    }

    /// Polls once and applies what is deliverable. Returns the applied
    /// records in order.
    pub fn step(&self, tb: &Testbed, opts: &StepOptions<'_>) -> Result<Vec<Applied>, ServiceError> {
        let p = self.projection;
        let records = tb
            .broker
            .poll(p.topic(), p.group(), opts.max, opts.wait)
            .map_err(|e| ServiceError::Internal(e.to_string()))?;
        let mut blocked: Vec<u32> = Vec::new();
        let mut done: Vec<Arc<EventRecord>> = Vec::new();
        let mut applied = Vec::new();
        let mut failure = None;
        for r in records {
            if blocked.contains(&r.partition) {
                continue;
            }
            if !(opts.deliverable)(&r) {
                blocked.push(r.partition);
                continue;
            }
            // undecodable records are skipped rather than wedging the group
            let event = DomainEvent::from_bytes(&r.payload).ok();
            if let Some(event) = event {
                if let Err(e) = p.apply(tb, &event) {
                    blocked.push(r.partition);
                    failure = Some(e);
                    continue;
                }
            }
            let first_time = {
                let mut upto = self.applied_upto.lock();
                let next = upto.entry(r.partition).or_insert(0);
                let first = r.offset >= *next;
                *next = (*next).max(r.offset + 1);
                first
            };
            done.push(r.clone());
            applied.push(Applied { record: r, first_time });
        }
        if !opts.skip_commit && !done.is_empty() {
            tb.broker
                .commit_records(p.group(), &done)
                .map_err(|e| ServiceError::Internal(e.to_string()))?;
        }
        match failure {
            Some(e) if applied.is_empty() => Err(e),
            _ => Ok(applied),
        }
    }

    /// Records not yet committed by this group.
    pub fn lag(&self, tb: &Testbed) -> u64 {
        tb.broker
            .lag(self.projection.group(), self.projection.topic())
            .unwrap_or(0)
    }
}
