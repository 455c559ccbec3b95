//! Cross-service invariant checking over a snapshot of every store.
//!
//! Stores are read in a fixed order: bookings first, then inventory,
//! payments, projections and (at quiesce) notifications and the event log.
//! Once a booking is terminal its reservation and payment no longer change,
//! so reading bookings first means a terminal booking is always judged
//! against settled downstream state, even while traffic is running.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::services::model::{Booking, BookingStatus, DomainEvent, Flight, Payment, PaymentStatus};
use crate::services::{ServiceError, Testbed, TOPIC_BOOKINGS};

/// When the snapshot was taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Live sample; sagas may be half way through.
    InFlight,
    /// After quiesce; nothing is moving.
    Final,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    pub booking_id: String,
    pub invariant: String,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub total_bookings: u64,
    pub consistent_bookings: u64,
    pub consistency_rate: f64,
    pub violations: Vec<Violation>,
}

impl ConsistencyReport {
    pub fn vacuous() -> Self {
        ConsistencyReport {
            total_bookings: 0,
            consistent_bookings: 0,
            consistency_rate: 1.0,
            violations: Vec::new(),
        }
    }
}

/// Booking events found on the log for one booking.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EventTrail {
    pub created: u32,
    pub confirmed: u32,
    pub compensated: u32,
}

/// Everything the checker looks at, detached from the live stores.
#[derive(Clone, Debug, Default)]
pub struct Snapshot {
    pub bookings: Vec<Booking>,
    pub flights: Vec<Flight>,
    /// (flight, booking, seats)
    pub reservations: Vec<(String, String, u32)>,
    pub payments: Vec<Payment>,
    /// Booking status as the trip projection sees it.
    pub trip_views: BTreeMap<String, BookingStatus>,
    /// Notification records per booking; only read at quiesce.
    pub notifications: BTreeMap<String, u32>,
    /// Only read at quiesce.
    pub events: BTreeMap<String, EventTrail>,
}

impl Snapshot {
    pub fn capture(tb: &Testbed, phase: Phase) -> Result<Snapshot, ServiceError> {
        let bookings = tb.bookings.all_bookings()?;
        let (flights, reservations) = tb.flights.inventory_snapshot()?;
        let payments = tb.payments.all_payments()?;
        let mut trip_views = BTreeMap::new();
        for view in tb.profiles.all_trip_views()? {
            if let Some(map) = view["bookings"].as_object() {
                for (id, status) in map {
                    if let Ok(s) = serde_json::from_value::<BookingStatus>(status.clone()) {
                        trip_views.insert(id.clone(), s);
                    }
                }
            }
        }
        let mut snap = Snapshot {
            bookings,
            flights,
            reservations,
            payments,
            trip_views,
            ..Snapshot::default()
        };
        if phase == Phase::Final {
            for rec in tb.notifications.all_records()? {
                *snap.notifications.entry(rec.booking_id).or_insert(0) += 1;
            }
            let parts = tb
                .broker
                .topic_info(TOPIC_BOOKINGS)
                .map_err(|e| ServiceError::Internal(e.to_string()))?
                .partitions;
            for p in 0..parts {
                let records = tb
                    .broker
                    .read_partition(TOPIC_BOOKINGS, p, 0)
                    .map_err(|e| ServiceError::Internal(e.to_string()))?;
                for r in records {
                    let Ok(ev) = DomainEvent::from_bytes(&r.payload) else {
                        continue;
                    };
                    let trail = snap.events.entry(ev.booking_id().to_string()).or_default();
                    match ev {
                        DomainEvent::BookingCreated { .. } => trail.created += 1,
                        DomainEvent::BookingConfirmed { .. } => trail.confirmed += 1,
                        DomainEvent::BookingCompensated { .. } => trail.compensated += 1,
                        _ => {}
                    }
                }
            }
        }
        Ok(snap)
    }
}

/// Checks every booking against the cross-service invariants.
pub fn check_consistency(snap: &Snapshot, phase: Phase) -> ConsistencyReport {
    let final_phase = phase == Phase::Final;
    let mut entities: BTreeSet<String> = snap.bookings.iter().map(|b| b.booking_id.clone()).collect();
    let mut violations: Vec<Violation> = Vec::new();
    let mut flag = |id: &str, invariant: &str, detail: String| {
        violations.push(Violation {
            booking_id: id.to_string(),
            invariant: invariant.to_string(),
            detail,
        });
    };

    let flights: BTreeMap<&str, &Flight> = snap.flights.iter().map(|f| (f.flight_id.as_str(), f)).collect();
    let mut held: BTreeMap<(&str, &str), u32> = BTreeMap::new();
    let mut held_per_flight: BTreeMap<&str, u64> = BTreeMap::new();
    for (flight, booking, seats) in &snap.reservations {
        held.insert((flight.as_str(), booking.as_str()), *seats);
        *held_per_flight.entry(flight.as_str()).or_insert(0) += u64::from(*seats);
    }
    let payments_by_id: BTreeMap<&str, &Payment> = snap.payments.iter().map(|p| (p.payment_id.as_str(), p)).collect();
    let mut payments_by_booking: BTreeMap<&str, Vec<&Payment>> = BTreeMap::new();
    for p in &snap.payments {
        payments_by_booking.entry(p.booking_id.as_str()).or_default().push(p);
    }

    // flight-level conservation, blamed on every booking holding seats there
    let mut broken_flights = BTreeSet::new();
    for f in &snap.flights {
        let held = held_per_flight.get(f.flight_id.as_str()).copied().unwrap_or(0);
        if u64::from(f.seats_available) + held != u64::from(f.capacity) || f.seats_available > f.capacity {
            broken_flights.insert(f.flight_id.as_str());
            let id = format!("flight:{}", f.flight_id);
            flag(
                &id,
                "seat_conservation",
                format!("capacity {} != available {} + held {held}", f.capacity, f.seats_available),
            );
            entities.insert(id);
        }
    }

    for b in &snap.bookings {
        let id = b.booking_id.as_str();
        let resv = held.get(&(b.flight_id.as_str(), id)).copied();
        let payment = b
            .payment_id
            .as_deref()
            .and_then(|pid| payments_by_id.get(pid).copied())
            .or_else(|| payments_by_booking.get(id).and_then(|v| v.first().copied()));

        if broken_flights.contains(b.flight_id.as_str()) && b.status.holds_seats() {
            flag(id, "seat_conservation", format!("flight {} does not balance", b.flight_id));
        }

        match b.status {
            BookingStatus::Confirmed => {
                match payment {
                    Some(p) if p.status == PaymentStatus::Charged && b.payment_id.as_deref() == Some(&p.payment_id) => {
                        if let Some(f) = flights.get(b.flight_id.as_str()) {
                            let expected = u64::from(b.seats) * f.price;
                            if p.amount != expected {
                                flag(id, "payment_coupling", format!("charged {} but seats x price is {expected}", p.amount));
                            }
                        }
                    }
                    Some(p) => flag(id, "payment_coupling", format!("confirmed but payment is {:?}", p.status)),
                    None => flag(id, "payment_coupling", "confirmed without a payment".into()),
                }
                if resv != Some(b.seats) {
                    flag(id, "reservation_mismatch", format!("holds {resv:?} seats, booked {}", b.seats));
                }
            }
            BookingStatus::Compensated | BookingStatus::Cancelled => {
                if let Some(p) = payment {
                    if !matches!(p.status, PaymentStatus::Refunded | PaymentStatus::Failed) {
                        flag(id, "payment_coupling", format!("rolled back but payment is {:?}", p.status));
                    }
                }
                if let Some(s) = resv {
                    flag(id, "reservation_mismatch", format!("rolled back but still holds {s} seats"));
                }
            }
            BookingStatus::Pending => {
                if final_phase {
                    flag(id, "stuck_pending", "still pending after quiesce".into());
                }
            }
        }

        let view = snap.trip_views.get(id).copied();
        let view_ok = view == Some(b.status) || (b.status == BookingStatus::Pending && view.is_some());
        if !view_ok {
            flag(id, "projection_lag", format!("trip view shows {view:?}, store has {:?}", b.status));
        }

        if final_phase {
            let notes = snap.notifications.get(id).copied().unwrap_or(0);
            match b.status {
                BookingStatus::Confirmed if notes == 0 => {
                    flag(id, "notification_completeness", "confirmed without a notification".into())
                }
                BookingStatus::Compensated | BookingStatus::Cancelled if notes > 0 => {
                    flag(id, "notification_completeness", format!("rolled back but {notes} notifications"))
                }
                _ => {}
            }
            let trail = snap.events.get(id).copied().unwrap_or_default();
            let trail_ok = trail.created == 1
                && match b.status {
                    BookingStatus::Confirmed => trail.confirmed == 1 && trail.compensated == 0,
                    BookingStatus::Compensated | BookingStatus::Cancelled => {
                        trail.compensated == 1 && trail.confirmed == 0
                    }
                    BookingStatus::Pending => true,
                };
            if !trail_ok {
                flag(id, "event_trail", format!("{trail:?} for a {:?} booking", b.status));
            }
        }
    }

    if final_phase {
        let known: BTreeSet<&str> = snap.bookings.iter().map(|b| b.booking_id.as_str()).collect();
        for (flight, booking, seats) in &snap.reservations {
            if !known.contains(booking.as_str()) {
                flag(booking, "orphan_reservation", format!("{seats} seats on {flight} with no booking"));
                entities.insert(booking.clone());
            }
        }
        for p in &snap.payments {
            if !known.contains(p.booking_id.as_str()) {
                flag(&p.booking_id, "orphan_payment", format!("{} is {:?} with no booking", p.payment_id, p.status));
                entities.insert(p.booking_id.clone());
            }
        }
    }

    violations.sort();
    let inconsistent: BTreeSet<&str> = violations.iter().map(|v| v.booking_id.as_str()).collect();
    let total = entities.len() as u64;
    let consistent = entities.iter().filter(|id| !inconsistent.contains(id.as_str())).count() as u64;
    ConsistencyReport {
        total_bookings: total,
        consistent_bookings: consistent,
        consistency_rate: if total == 0 { 1.0 } else { consistent as f64 / total as f64 },
        violations,
    }
}
