use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde_json::json;
use skyway::broker::EventRecord;
use skyway::clock::{SharedClock, VirtualClock};
use skyway::services::consumers::{Projection, StepOptions, TopicConsumer};
use skyway::services::model::{BookingStatus, DomainEvent, Flight, PaymentStatus};
use skyway::services::notification::{Finish, Processed};
use skyway::services::{BookingResult, ServiceError, Testbed, TestbedConfig, QUEUE_EMAIL, TOPIC_BOOKINGS};

fn flight(id: &str, capacity: u32) -> Flight {
    Flight {
        flight_id: id.into(),
        origin: "DAC".into(),
        destination: "DXB".into(),
        departure_ts: 1_767_312_000,
        date: "2026-01-02".into(),
        capacity,
        seats_available: capacity,
        price: 12_500,
        rev: 0,
    }
}

fn small_bed(clock: SharedClock, p_fail: f64) -> Testbed {
    let cfg = TestbedConfig {
        seed: 11,
        payment_fail_prob: p_fail,
        fixtures: skyway::services::FixtureConfig {
            flights: 0,
            users: 5,
            days: 30,
        },
        ..TestbedConfig::default()
    };
    let tb = Testbed::new(clock, &cfg);
    tb.flights.add_flight(flight("F100", 100)).unwrap();
    tb.flights.add_flight(flight("F60", 60)).unwrap();
    tb.flights.add_flight(flight("F2", 2)).unwrap();
    tb
}

fn bed(p_fail: f64) -> (VirtualClock, Testbed) {
    let vc = VirtualClock::new();
    let tb = small_bed(vc.shared(), p_fail);
    (vc, tb)
}

fn drain_notifications(tb: &Testbed) {
    while tb.notifications.process_one(QUEUE_EMAIL, Finish::Ack) != Processed::Idle {}
    while tb.notifications.process_one(skyway::services::QUEUE_SMS, Finish::Ack) != Processed::Idle {}
}

fn topic_events(tb: &Testbed, topic: &str) -> Vec<DomainEvent> {
    let mut out = Vec::new();
    for p in 0..4 {
        for r in tb.broker.read_partition(topic, p, 0).unwrap() {
            out.push(DomainEvent::from_bytes(&r.payload).unwrap());
        }
    }
    out
}

#[test]
fn booking_two_of_hundred_confirms() {
    let (_vc, tb) = bed(0.0);
    let r = tb.bookings.create_booking("u0001", "F100", 2, "req-1").unwrap();
    assert_eq!(r, BookingResult::Confirmed { booking_id: "bk-req-1".into() });
    assert_eq!(tb.flights.get_flight("F100").unwrap().seats_available, 98);
    let b = tb.bookings.get_booking("bk-req-1").unwrap();
    assert_eq!(b.status, BookingStatus::Confirmed);
    let p = tb.payments.get_payment(b.payment_id.as_deref().unwrap()).unwrap();
    assert_eq!(p.status, PaymentStatus::Charged);
    assert_eq!(p.amount, 2 * 12_500);

    let events = topic_events(&tb, TOPIC_BOOKINGS);
    assert!(matches!(events[0], DomainEvent::BookingCreated { .. }));
    assert!(matches!(events[1], DomainEvent::BookingConfirmed { .. }));
    assert_eq!(events.len(), 2);
    let depth = tb.broker.queue_depth(QUEUE_EMAIL).ready + tb.broker.queue_depth(skyway::services::QUEUE_SMS).ready;
    assert_eq!(depth, 1);
}

#[test]
fn payment_failure_compensates_everything() {
    let (_vc, tb) = bed(1.0);
    let r = tb.bookings.create_booking("u0001", "F100", 2, "req-9").unwrap();
    assert!(matches!(r, BookingResult::Compensated { .. }), "{r:?}");
    assert_eq!(tb.flights.get_flight("F100").unwrap().seats_available, 100);
    assert!(tb.flights.reservations("F100").is_empty());
    let b = tb.bookings.get_booking("bk-req-9").unwrap();
    assert_eq!(b.status, BookingStatus::Compensated);
    let p = tb.payments.get_payment(b.payment_id.as_deref().unwrap()).unwrap();
    assert_eq!(p.status, PaymentStatus::Failed);
    drain_notifications(&tb);
    assert!(tb.notifications.all_records().unwrap().is_empty());
    let events = topic_events(&tb, TOPIC_BOOKINGS);
    let kinds: Vec<_> = events
        .iter()
        .map(|e| match e {
            DomainEvent::BookingCreated { .. } => "created",
            DomainEvent::BookingCompensated { .. } => "compensated",
            _ => "other",
        })
        .collect();
    assert_eq!(kinds, ["created", "compensated"]);
}

#[test]
fn payment_outage_compensates_without_a_payment() {
    let (_vc, tb) = bed(0.0);
    tb.payments.set_available(false);
    let r = tb.bookings.create_booking("u0002", "F100", 1, "req-2").unwrap();
    assert!(matches!(r, BookingResult::Compensated { .. }));
    assert_eq!(tb.flights.get_flight("F100").unwrap().seats_available, 100);
    assert!(tb.payments.all_payments().unwrap().is_empty());
}

#[test]
fn insufficient_seats_rejects_without_events() {
    let (_vc, tb) = bed(0.0);
    let r = tb.bookings.create_booking("u0001", "F2", 3, "req-3").unwrap();
    assert!(matches!(r, BookingResult::Rejected { .. }));
    assert_eq!(tb.flights.get_flight("F2").unwrap().seats_available, 2);
    assert!(tb.bookings.get_booking("bk-req-3").is_err());
    assert!(topic_events(&tb, TOPIC_BOOKINGS).is_empty());
    assert!(tb.payments.all_payments().unwrap().is_empty());
}

#[test]
fn same_correlation_id_books_once() {
    let (_vc, tb) = bed(0.0);
    let a = tb.bookings.create_booking("u0001", "F100", 2, "dup").unwrap();
    let b = tb.bookings.create_booking("u0001", "F100", 2, "dup").unwrap();
    assert_eq!(a, b);
    assert_eq!(tb.flights.get_flight("F100").unwrap().seats_available, 98);
    assert_eq!(tb.payments.attempts(), 1);
}

/// Serial oracle: grant each request in turn while seats remain.
fn serial_confirmed(capacity: u32, requests: &[u32]) -> (u32, u32) {
    let mut left = capacity;
    let mut confirmed = 0;
    for &n in requests {
        if n <= left {
            left -= n;
            confirmed += 1;
        }
    }
    (confirmed, capacity - left)
}

#[test]
fn fifty_concurrent_bookings_on_sixty_seats() {
    let tb = Arc::new(small_bed(skyway::clock::SystemClock::shared(), 0.0));
    let handles: Vec<_> = (0..50)
        .map(|i| {
            let tb = tb.clone();
            thread::spawn(move || {
                let user = format!("u{:04}", i % 5 + 1);
                tb.bookings.create_booking(&user, "F60", 2, &format!("c-{i}")).unwrap()
            })
        })
        .collect();
    let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    let confirmed = results.iter().filter(|r| matches!(r, BookingResult::Confirmed { .. })).count() as u32;
    let rejected = results.iter().filter(|r| matches!(r, BookingResult::Rejected { .. })).count();
    let (oracle_confirmed, oracle_seats) = serial_confirmed(60, &[2; 50]);
    assert_eq!(confirmed, oracle_confirmed);
    assert_eq!((confirmed, rejected), (30, 20));

    let f = tb.flights.get_flight("F60").unwrap();
    let held: u32 = tb
        .bookings
        .all_bookings()
        .unwrap()
        .iter()
        .filter(|b| b.flight_id == "F60" && b.status.holds_seats())
        .map(|b| b.seats)
        .sum();
    assert_eq!(f.capacity, f.seats_available + held);
    assert_eq!(held, oracle_seats);
}

#[test]
fn reserve_release_round_trip_for_every_n() {
    let (_vc, tb) = bed(0.0);
    for n in 1..=100 {
        let booking = format!("rt-{n}");
        let c = tb.flights.reserve_seats("F100", &booking, n).unwrap();
        assert_eq!(c.seats_available, 100 - n);
        let r = tb.flights.release_seats("F100", &booking).unwrap();
        assert_eq!(r.seats, n);
        assert_eq!(tb.flights.get_flight("F100").unwrap().seats_available, 100);
    }
}

#[test]
fn reserve_exact_and_over() {
    let (_vc, tb) = bed(0.0);
    assert_eq!(
        tb.flights.reserve_seats("F2", "x", 3),
        Err(ServiceError::InsufficientSeats { available: 2, requested: 3 })
    );
    assert_eq!(tb.flights.get_flight("F2").unwrap().seats_available, 2);
    let c = tb.flights.reserve_seats("F2", "y", 2).unwrap();
    assert_eq!(c.seats_available, 0);
    assert!(matches!(tb.flights.reserve_seats("F2", "y", 0), Err(ServiceError::BadRequest(_))));
}

#[test]
fn seat_change_invalidates_flight_detail() {
    let (_vc, tb) = bed(0.0);
    assert_eq!(tb.flights.flight_detail("F100").unwrap()["seats_available"], 100);
    tb.flights.reserve_seats("F100", "b1", 5).unwrap();
    assert_eq!(tb.flights.flight_detail("F100").unwrap()["seats_available"], 95);
}

#[test]
fn repeated_search_is_served_from_cache() {
    let (_vc, tb) = bed(0.0);
    let first = tb.flights.search_flights("DAC", "DXB", "2026-01-02").unwrap();
    let loads = tb.flights.load_count();
    let queries = tb.flights.search_store().query_count();
    let second = tb.flights.search_flights("DAC", "DXB", "2026-01-02").unwrap();
    assert_eq!(first, second);
    assert_eq!(tb.flights.load_count(), loads);
    assert_eq!(tb.flights.search_store().query_count(), queries);
    assert_eq!(first.as_array().unwrap().len(), 3);
    assert!(tb.flights.search_flights("AMS", "SYD", "2026-01-02").unwrap().as_array().unwrap().is_empty());
}

#[test]
fn search_staleness_is_bounded_by_ttl() {
    let (vc, tb) = bed(0.0);
    let avail = |tb: &Testbed| {
        let v = tb.flights.search_flights("DAC", "DXB", "2026-01-02").unwrap();
        v.as_array().unwrap().iter().find(|f| f["flight_id"] == "F100").unwrap()["seats_available"].clone()
    };
    assert_eq!(avail(&tb), 100);
    tb.flights.reserve_seats("F100", "b1", 4).unwrap();
    let indexer = TopicConsumer::new(Projection::SearchIndex);
    let all = |_: &EventRecord| true;
    indexer
        .step(&tb, &StepOptions { max: 100, wait: Duration::ZERO, deliverable: &all, skip_commit: false })
        .unwrap();
    // still inside the TTL: the cached result is stale
    vc.advance(Duration::from_secs(119));
    assert_eq!(avail(&tb), 100);
    vc.advance(Duration::from_secs(2));
    assert_eq!(avail(&tb), 96);
}

#[test]
fn payment_fail_fraction_tracks_probability() {
    let (_vc, tb) = bed(0.05);
    let n = 10_000u64;
    for i in 0..n {
        tb.payments.charge(&format!("bk-{i}"), "u0001", 100).unwrap();
    }
    let failed = tb
        .payments
        .all_payments()
        .unwrap()
        .iter()
        .filter(|p| p.status == PaymentStatus::Failed)
        .count() as f64;
    let frac = failed / n as f64;
    assert!((frac - 0.05).abs() <= 0.01, "failed fraction {frac}");
    assert_eq!(tb.payments.injected_failures() as f64, failed);
}

#[test]
fn refund_rules() {
    let (_vc, tb) = bed(0.0);
    tb.payments.charge("bk-a", "u0001", 500).unwrap();
    let r1 = tb.payments.refund("pay-a").unwrap();
    let r2 = tb.payments.refund("pay-a").unwrap();
    assert_eq!(r1, r2);
    assert_eq!(r1.status, PaymentStatus::Refunded);
    tb.payments.set_fail_probability(1.0);
    tb.payments.charge("bk-b", "u0001", 500).unwrap();
    assert!(matches!(tb.payments.refund("pay-b"), Err(ServiceError::InvalidState(_))));
}

#[test]
fn trip_for_user_without_bookings() {
    let (_vc, tb) = bed(0.0);
    let trip = tb.get_trip("u0003").unwrap();
    assert_eq!(trip["profile"]["user_id"], "u0003");
    assert_eq!(trip["bookings"], json!([]));
    assert!(trip["profile"].get("credential").is_none());
    assert!(matches!(tb.get_trip("nobody"), Err(ServiceError::NotFound(_))));
}

#[test]
fn trip_sections_reference_each_other() {
    let (_vc, tb) = bed(0.0);
    tb.bookings.create_booking("u0001", "F100", 1, "t1").unwrap();
    let trip = tb.get_trip("u0001").unwrap();
    let bookings = trip["bookings"].as_array().unwrap();
    assert_eq!(bookings.len(), 1);
    let b = &bookings[0];
    let flights = trip["flights"].as_array().unwrap();
    let payments = trip["payments"].as_array().unwrap();
    // referential integrity: every id mentioned resolves within the trip
    assert!(flights.iter().any(|f| f["flight_id"] == b["flight_id"]));
    assert!(payments.iter().any(|p| p["payment_id"] == b["payment_id"] && p["booking_id"] == b["booking_id"]));
    assert_eq!(b["user_id"], trip["profile"]["user_id"]);
}

#[test]
fn one_confirmed_booking_one_email() {
    let (_vc, tb) = bed(0.0);
    tb.profiles
        .update_profile("u0001", &json!({"preferences": {"notify": "email"}}))
        .unwrap();
    tb.bookings.create_booking("u0001", "F100", 1, "n1").unwrap();
    drain_notifications(&tb);
    let recs = tb.notifications.records_for("bk-n1").unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].kind, skyway::services::model::NotificationKind::Email);
}

#[test]
fn duplicate_delivery_writes_one_record() {
    let (_vc, tb) = bed(0.0);
    tb.profiles
        .update_profile("u0001", &json!({"preferences": {"notify": "email"}}))
        .unwrap();
    tb.bookings.create_booking("u0001", "F100", 1, "n2").unwrap();
    let first = tb.notifications.process_one(QUEUE_EMAIL, Finish::Redeliver);
    assert!(matches!(first, Processed::Acked { duplicate: false, .. }));
    let second = tb.notifications.process_one(QUEUE_EMAIL, Finish::Ack);
    assert!(matches!(second, Processed::Acked { duplicate: true, .. }));
    assert_eq!(tb.notifications.process_one(QUEUE_EMAIL, Finish::Ack), Processed::Idle);
    assert_eq!(tb.notifications.records_for("bk-n2").unwrap().len(), 1);
}

#[test]
fn crash_before_ack_recovers_without_duplicate() {
    let (vc, tb) = bed(0.0);
    tb.profiles
        .update_profile("u0001", &json!({"preferences": {"notify": "email"}}))
        .unwrap();
    tb.bookings.create_booking("u0001", "F100", 1, "n3").unwrap();
    let crashed = tb.notifications.process_one(QUEUE_EMAIL, Finish::Crash);
    assert!(matches!(crashed, Processed::Crashed { .. }));
    assert_eq!(tb.notifications.process_one(QUEUE_EMAIL, Finish::Ack), Processed::Idle);
    // restart after the visibility timeout: the message comes back
    vc.advance(skyway::services::notification::NOTIFY_VISIBILITY + Duration::from_millis(1));
    let again = tb.notifications.process_one(QUEUE_EMAIL, Finish::Ack);
    assert!(matches!(again, Processed::Acked { duplicate: true, .. }));
    assert_eq!(tb.notifications.records_for("bk-n3").unwrap().len(), 1);
    assert!(tb.broker.queue_depth(QUEUE_EMAIL).is_empty());
}

#[test]
fn store_failure_nacks_for_redelivery() {
    let (_vc, tb) = bed(0.0);
    tb.profiles
        .update_profile("u0001", &json!({"preferences": {"notify": "email"}}))
        .unwrap();
    tb.bookings.create_booking("u0001", "F100", 1, "n4").unwrap();
    tb.notifications.docs().set_unavailable(true);
    assert!(matches!(tb.notifications.process_one(QUEUE_EMAIL, Finish::Ack), Processed::Nacked { .. }));
    tb.notifications.docs().set_unavailable(false);
    assert!(matches!(tb.notifications.process_one(QUEUE_EMAIL, Finish::Ack), Processed::Acked { .. }));
    assert_eq!(tb.notifications.records_for("bk-n4").unwrap().len(), 1);
}

#[test]
fn projections_survive_replay() {
    let (_vc, tb) = bed(0.0);
    tb.bookings.create_booking("u0001", "F100", 1, "p1").unwrap();
    tb.bookings.create_booking("u0001", "F100", 1, "p2").unwrap();
    let all = |_: &EventRecord| true;
    for proj in Projection::ALL {
        let c = TopicConsumer::new(proj);
        let replay = StepOptions { max: 100, wait: Duration::ZERO, deliverable: &all, skip_commit: true };
        let first = c.step(&tb, &replay).unwrap();
        assert!(first.iter().all(|a| a.first_time));
        let commit = StepOptions { skip_commit: false, ..replay };
        let second = c.step(&tb, &commit).unwrap();
        assert!(second.iter().all(|a| !a.first_time));
        assert_eq!(c.lag(&tb), 0);
    }
    let view = tb.profiles.trip_view("u0001").unwrap().unwrap();
    assert_eq!(view["bookings"]["bk-p1"], "Confirmed");
    let profile = tb.profiles.get_profile("u0001").unwrap();
    assert_eq!(profile["loyalty_points"], 200);
}
