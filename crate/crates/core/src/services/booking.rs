//! Booking service and the reservation saga.
//!
//! A booking runs `ReserveSeats -> ChargePayment -> ConfirmBooking`. If a
//! later step fails the earlier ones are undone in reverse order, so a
//! booking ends Confirmed, Compensated, or (when seats ran out) Rejected
//! without ever having been written.

use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::flight::FlightService;
use super::model::{Booking, BookingStatus, DomainEvent, NotificationRequest};
use super::payment::{ChargeOutcome, PaymentService};
use super::profile::ProfileService;
use super::{ServiceError, TOPIC_BOOKINGS};
use crate::broker::Broker;
use crate::clock::SharedClock;
use crate::store::{TxnStore, DEFAULT_TXN_RETRIES};
use crate::txn::{JournalEntry, JournalSink, SagaOrchestrator, SagaOutcome, SagaStep, StepResult};

pub const STEP_RESERVE: &str = "ReserveSeats";
pub const STEP_CHARGE: &str = "ChargePayment";
pub const STEP_CONFIRM: &str = "ConfirmBooking";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status")]
pub enum BookingResult {
    Confirmed { booking_id: String },
    Rejected { reason: String },
    Compensated { booking_id: String, reason: String },
}

impl BookingResult {
    pub fn label(&self) -> &'static str {
        match self {
            BookingResult::Confirmed { .. } => "Confirmed",
            BookingResult::Rejected { .. } => "Rejected",
            BookingResult::Compensated { .. } => "Compensated",
        }
    }
}

/// Running totals of saga outcomes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BookingCounts {
    pub confirmed: u64,
    pub rejected: u64,
    pub compensated: u64,
    pub stuck: u64,
}

#[derive(Debug, Default)]
struct Counters {
    confirmed: AtomicU64,
    rejected: AtomicU64,
    compensated: AtomicU64,
    stuck: AtomicU64,
}

/// State threaded through the saga steps.
#[derive(Clone, Debug)]
pub struct BookingCtx {
    pub booking_id: String,
    pub user_id: String,
    pub flight_id: String,
    pub seats: u32,
    pub price: u64,
    pub payment_id: Option<String>,
}

pub fn booking_id_for(correlation_id: &str) -> String {
    format!("bk-{correlation_id}")
}

fn booking_key(id: &str) -> String {
    format!("booking/{id}")
}

fn decode(v: Value) -> Result<Booking, ServiceError> {
    serde_json::from_value(v).map_err(|e| ServiceError::Corrupt(e.to_string()))
}

#[derive(Debug)]
pub struct BookingService {
    clock: SharedClock,
    store: TxnStore,
    broker: Arc<Broker>,
    flights: Arc<FlightService>,
    payments: Arc<PaymentService>,
    profiles: Arc<ProfileService>,
    orchestrator: SagaOrchestrator,
    in_progress: Mutex<HashSet<String>>,
    counters: Counters,
}

/// Journal entries land in the booking store under `saga/<id>/<seq>`.
struct StoreJournal<'a>(&'a TxnStore);

impl JournalSink for StoreJournal<'_> {
    fn append(&self, entry: &JournalEntry) -> Result<(), String> {
        let key = format!("saga/{}/{:04}", entry.saga_id, entry.seq);
        let value = serde_json::to_value(entry).map_err(|e| e.to_string())?;
        self.0
            .transact(DEFAULT_TXN_RETRIES, |t| -> Result<(), ServiceError> {
                t.set(&key, value.clone());
                Ok(())
            })
            .map_err(|e| e.to_string())
    }
}

struct ReserveSeats<'a>(&'a BookingService);
struct ChargePayment<'a>(&'a BookingService);
struct ConfirmBooking<'a>(&'a BookingService);

impl SagaStep<BookingCtx> for ReserveSeats<'_> {
    fn name(&self) -> &str {
        STEP_RESERVE
    }

    fn action(&self, ctx: &mut BookingCtx) -> StepResult {
        let svc = self.0;
        match svc.flights.reserve_seats(&ctx.flight_id, &ctx.booking_id, ctx.seats) {
            Ok(_) => {}
            Err(ServiceError::InsufficientSeats { available, requested }) => {
                return StepResult::Failed(format!("insufficient seats: {available} available, {requested} requested"));
            }
            Err(e) => return StepResult::Failed(e.to_string()),
        }
        if let Err(e) = svc.insert_pending(ctx) {
            // the step failed, so nobody will compensate it; undo here
            let _ = svc.flights.release_seats(&ctx.flight_id, &ctx.booking_id);
            return StepResult::Failed(e.to_string());
        }
        StepResult::Ok(json!({"seats": ctx.seats}))
    }

    fn compensate(&self, ctx: &mut BookingCtx) -> Result<(), String> {
        self.0
            .flights
            .release_seats(&ctx.flight_id, &ctx.booking_id)
            .map(|_| ())
            .map_err(|e| e.to_string())
    }
}

impl SagaStep<BookingCtx> for ChargePayment<'_> {
    fn name(&self) -> &str {
        STEP_CHARGE
    }

    fn action(&self, ctx: &mut BookingCtx) -> StepResult {
        let amount = u64::from(ctx.seats) * ctx.price;
        match self.0.payments.charge(&ctx.booking_id, &ctx.user_id, amount) {
            Ok(ChargeOutcome::Charged(pid)) => {
                ctx.payment_id = Some(pid.clone());
                StepResult::Ok(json!({"payment_id": pid}))
            }
            Ok(ChargeOutcome::Failed(pid)) => {
                ctx.payment_id = Some(pid);
                StepResult::Failed("payment declined".into())
            }
            Err(e) => StepResult::Failed(e.to_string()),
        }
    }

    fn compensate(&self, ctx: &mut BookingCtx) -> Result<(), String> {
        let Some(pid) = &ctx.payment_id else {
            return Ok(());
        };
        self.0.payments.refund(pid).map(|_| ()).map_err(|e| e.to_string())
    }

    fn restore(&self, ctx: &mut BookingCtx, output: &Value) {
        ctx.payment_id = output["payment_id"].as_str().map(str::to_string);
    }
}

impl SagaStep<BookingCtx> for ConfirmBooking<'_> {
    fn name(&self) -> &str {
        STEP_CONFIRM
    }

    fn action(&self, ctx: &mut BookingCtx) -> StepResult {
        match self.0.confirm(ctx) {
            Ok(()) => StepResult::Ok(Value::Null),
            Err(e) => StepResult::Failed(e.to_string()),
        }
    }

    fn compensate(&self, ctx: &mut BookingCtx) -> Result<(), String> {
        self.0
            .set_status(&ctx.booking_id, BookingStatus::Cancelled, ctx.payment_id.clone())
            .map_err(|e| e.to_string())
    }
}

impl BookingService {
    pub fn new(
        clock: SharedClock,
        broker: Arc<Broker>,
        flights: Arc<FlightService>,
        payments: Arc<PaymentService>,
        profiles: Arc<ProfileService>,
    ) -> Self {
        BookingService {
            orchestrator: SagaOrchestrator::new(clock.clone()),
            clock,
            store: TxnStore::new(),
            broker,
            flights,
            payments,
            profiles,
            in_progress: Mutex::new(HashSet::new()),
            counters: Counters::default(),
        }
    }

    pub fn store(&self) -> &TxnStore {
        &self.store
    }

    pub fn counts(&self) -> BookingCounts {
        BookingCounts {
            confirmed: self.counters.confirmed.load(Ordering::Relaxed),
            rejected: self.counters.rejected.load(Ordering::Relaxed),
            compensated: self.counters.compensated.load(Ordering::Relaxed),
            stuck: self.counters.stuck.load(Ordering::Relaxed),
        }
    }

    /// Books `seats` on `flight_id`. The booking id comes from the request's
    /// correlation id, so a retried request returns the first outcome.
    pub fn create_booking(
        &self,
        user_id: &str,
        flight_id: &str,
        seats: u32,
        correlation_id: &str,
    ) -> Result<BookingResult, ServiceError> {
        if seats == 0 {
            return Err(ServiceError::BadRequest("seats must be at least 1".into()));
        }
        let booking_id = booking_id_for(correlation_id);
        if !self.in_progress.lock().insert(booking_id.clone()) {
            return Err(ServiceError::InvalidState(format!("booking {booking_id} already in progress")));
        }
        let out = self.run_saga(user_id, flight_id, seats, &booking_id);
        self.in_progress.lock().remove(&booking_id);
        out
    }

    fn run_saga(&self, user_id: &str, flight_id: &str, seats: u32, booking_id: &str) -> Result<BookingResult, ServiceError> {
        if let Some(existing) = self.store.get(&booking_key(booking_id)) {
            let b = decode(existing)?;
            return match b.status {
                BookingStatus::Confirmed => Ok(BookingResult::Confirmed {
                    booking_id: b.booking_id,
                }),
                BookingStatus::Compensated | BookingStatus::Cancelled => Ok(BookingResult::Compensated {
                    booking_id: b.booking_id,
                    reason: "already rolled back".into(),
                }),
                BookingStatus::Pending => Err(ServiceError::InvalidState(format!("booking {booking_id} is pending"))),
            };
        }
        let flight = self.flights.get_flight(flight_id)?;
        let mut ctx = BookingCtx {
            booking_id: booking_id.to_string(),
            user_id: user_id.to_string(),
            flight_id: flight_id.to_string(),
            seats,
            price: flight.price,
            payment_id: None,
        };
        let reserve = ReserveSeats(self);
        let charge = ChargePayment(self);
        let confirm = ConfirmBooking(self);
        let steps: [&dyn SagaStep<BookingCtx>; 3] = [&reserve, &charge, &confirm];
        let exec = self
            .orchestrator
            .execute(booking_id, &steps, &mut ctx, &StoreJournal(&self.store))
            .map_err(|e| ServiceError::Internal(e.to_string()))?;

        match exec.outcome {
            SagaOutcome::Completed => {
                self.counters.confirmed.fetch_add(1, Ordering::Relaxed);
                Ok(BookingResult::Confirmed {
                    booking_id: booking_id.to_string(),
                })
            }
            SagaOutcome::Compensated { failed_step, reason } if failed_step == STEP_RESERVE => {
                self.counters.rejected.fetch_add(1, Ordering::Relaxed);
                Ok(BookingResult::Rejected { reason })
            }
            SagaOutcome::Compensated { reason, .. } => {
                self.set_status(booking_id, BookingStatus::Compensated, ctx.payment_id.clone())?;
                self.publish(&DomainEvent::BookingCompensated {
                    booking_id: booking_id.to_string(),
                    user_id: user_id.to_string(),
                    reason: reason.clone(),
                });
                self.counters.compensated.fetch_add(1, Ordering::Relaxed);
                Ok(BookingResult::Compensated {
                    booking_id: booking_id.to_string(),
                    reason,
                })
            }
            SagaOutcome::StuckCompensating { step } => {
                self.counters.stuck.fetch_add(1, Ordering::Relaxed);
                Err(ServiceError::Stuck(format!("booking {booking_id} stuck compensating {step}")))
            }
        }
    }

    fn insert_pending(&self, ctx: &BookingCtx) -> Result<(), ServiceError> {
        let booking = Booking {
            booking_id: ctx.booking_id.clone(),
            user_id: ctx.user_id.clone(),
            flight_id: ctx.flight_id.clone(),
            seats: ctx.seats,
            status: BookingStatus::Pending,
            payment_id: None,
            created_ts: self.clock.now().as_nanos(),
        };
        let key = booking_key(&ctx.booking_id);
        let index = format!("user_bookings/{}/{}", ctx.user_id, ctx.booking_id);
        let value = serde_json::to_value(&booking).expect("booking serializes");
        let inserted = self.store.transact(DEFAULT_TXN_RETRIES, |t| -> Result<bool, ServiceError> {
            if t.get(&key).is_some() {
                return Ok(false);
            }
            t.set(&key, value.clone());
            t.set(&index, json!(true));
            Ok(true)
        })?;
        if inserted {
            self.publish(&DomainEvent::BookingCreated {
                booking_id: ctx.booking_id.clone(),
                user_id: ctx.user_id.clone(),
                flight_id: ctx.flight_id.clone(),
                seats: ctx.seats,
            });
        }
        Ok(())
    }

    fn confirm(&self, ctx: &BookingCtx) -> Result<(), ServiceError> {
        let Some(payment_id) = ctx.payment_id.clone() else {
            return Err(ServiceError::InvalidState("confirming without a payment".into()));
        };
        let changed = self.update_booking(&ctx.booking_id, |b| {
            if b.status == BookingStatus::Confirmed {
                return Ok(false);
            }
            if b.status != BookingStatus::Pending {
                return Err(ServiceError::InvalidState(format!("cannot confirm a {:?} booking", b.status)));
            }
            b.status = BookingStatus::Confirmed;
            b.payment_id = Some(payment_id.clone());
            Ok(true)
        })?;
        if changed {
            self.publish(&DomainEvent::BookingConfirmed {
                booking_id: ctx.booking_id.clone(),
                user_id: ctx.user_id.clone(),
                payment_id,
            });
            let kind = self.profiles.notification_kind(&ctx.user_id);
            let req = NotificationRequest {
                booking_id: ctx.booking_id.clone(),
                user_id: ctx.user_id.clone(),
                kind,
            };
            self.broker
                .enqueue(kind.queue(), &serde_json::to_vec(&req).expect("request serializes"));
        }
        Ok(())
    }

    fn set_status(&self, booking_id: &str, status: BookingStatus, payment_id: Option<String>) -> Result<(), ServiceError> {
        self.update_booking(booking_id, |b| {
            b.status = status;
            if payment_id.is_some() {
                b.payment_id = payment_id.clone();
            }
            Ok(true)
        })
        .map(|_| ())
    }

    fn update_booking<F>(&self, booking_id: &str, mut f: F) -> Result<bool, ServiceError>
    where
        F: FnMut(&mut Booking) -> Result<bool, ServiceError>,
    {
        let key = booking_key(booking_id);
        self.store.transact(DEFAULT_TXN_RETRIES, |t| {
            let Some(v) = t.get(&key) else {
                return Err(ServiceError::NotFound(format!("booking {booking_id}")));
            };
            let mut b = decode(v)?;
            let changed = f(&mut b)?;
            if changed {
                t.set(&key, serde_json::to_value(&b).expect("booking serializes"));
            }
            Ok(changed)
        })
    }

    fn publish(&self, event: &DomainEvent) {
        self.broker
            .publish(TOPIC_BOOKINGS, event.booking_id().as_bytes(), &event.to_bytes())
            .expect("bookings topic exists");
    }

    pub fn get_booking(&self, booking_id: &str) -> Result<Booking, ServiceError> {
        match self.store.get(&booking_key(booking_id)) {
            Some(v) => decode(v),
            None => Err(ServiceError::NotFound(format!("booking {booking_id}"))),
        }
    }

    /// A user's bookings in id order.
    pub fn bookings_for_user(&self, user_id: &str) -> Result<Vec<Booking>, ServiceError> {
        let prefix = format!("user_bookings/{user_id}/");
        self.store
            .scan_prefix(&prefix)
            .into_iter()
            .filter_map(|(k, _)| self.store.get(&booking_key(&k[prefix.len()..])))
            .map(decode)
            .collect()
    }

    pub fn all_bookings(&self) -> Result<Vec<Booking>, ServiceError> {
        self.store
            .scan_prefix("booking/")
            .into_iter()
            .map(|(_, v)| decode(v))
            .collect()
    }

    /// Journal of one saga as stored.
    pub fn saga_journal(&self, booking_id: &str) -> Result<Vec<JournalEntry>, ServiceError> {
        self.store
            .scan_prefix(&format!("saga/{booking_id}/"))
            .into_iter()
            .map(|(_, v)| serde_json::from_value(v).map_err(|e| ServiceError::Corrupt(e.to_string())))
            .collect()
    }
}
