//! Flight inventory: seat reservations in the transactional store, search
//! documents in the document store, both fronted by the shared cache.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde_json::{json, Value};

use super::model::{DomainEvent, Flight};
use super::{ServiceError, SharedCache, TOPIC_INVENTORY};
use crate::broker::Broker;
use crate::cache::TtlClass;
use crate::store::{DocumentStore, TxnStore, DEFAULT_TXN_RETRIES};

const SEARCH_COLLECTION: &str = "flight_search";

fn flight_key(id: &str) -> String {
    format!("flight/{id}")
}

fn resv_key(flight: &str, booking: &str) -> String {
    format!("resv/{flight}/{booking}")
}

/// Outcome of a seat change, carrying the availability right after commit.
/// (flight id, booking id, seats) for one reservation.
pub type ReservationRow = (String, String, u32);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeatChange {
    pub seats: u32,
    pub seats_available: u32,
    /// False when the call was a repeat and changed nothing.
    pub applied: bool,
}

#[derive(Debug)]
pub struct FlightService {
    store: TxnStore,
    search: DocumentStore,
    cache: SharedCache,
    broker: Arc<Broker>,
    loads: AtomicU64,
}

fn decode_flight(v: Value) -> Result<Flight, ServiceError> {
    serde_json::from_value(v).map_err(|e| ServiceError::Corrupt(e.to_string()))
}

fn search_doc(f: &Flight) -> Value {
    json!({
        "flight_id": f.flight_id,
        "origin": f.origin,
        "destination": f.destination,
        "date": f.date,
        "departure_ts": f.departure_ts,
        "capacity": f.capacity,
        "seats_available": f.seats_available,
        "price": f.price,
        "rev": f.rev,
    })
}

impl FlightService {
    pub fn new(cache: SharedCache, broker: Arc<Broker>) -> Self {
        FlightService {
            store: TxnStore::new(),
            search: DocumentStore::new(),
            cache,
            broker,
            loads: AtomicU64::new(0),
        }
    }

    pub fn store(&self) -> &TxnStore {
        &self.store
    }

    pub fn search_store(&self) -> &DocumentStore {
        &self.search
    }

    /// Number of times a cache miss reached the stores.
    pub fn load_count(&self) -> u64 {
        self.loads.load(Ordering::Relaxed)
    }

    pub fn add_flight(&self, flight: Flight) -> Result<(), ServiceError> {
        if flight.seats_available > flight.capacity {
            return Err(ServiceError::BadRequest("seats_available above capacity".into()));
        }
        let key = flight_key(&flight.flight_id);
        let value = serde_json::to_value(&flight).expect("flight serializes");
        self.store.transact(DEFAULT_TXN_RETRIES, |t| -> Result<(), ServiceError> {
            t.set(&key, value.clone());
            Ok(())
        })?;
        self.search.put(SEARCH_COLLECTION, &flight.flight_id, search_doc(&flight))?;
        self.cache.invalidate(&format!("avail:{}", flight.flight_id));
        Ok(())
    }

    /// Authoritative read, bypassing the cache.
    pub fn get_flight(&self, flight_id: &str) -> Result<Flight, ServiceError> {
        match self.store.get(&flight_key(flight_id)) {
            Some(v) => decode_flight(v),
            None => Err(ServiceError::NotFound(format!("flight {flight_id}"))),
        }
    }

    pub fn all_flights(&self) -> Result<Vec<Flight>, ServiceError> {
        self.store
            .scan_prefix("flight/")
            .into_iter()
            .map(|(_, v)| decode_flight(v))
            .collect()
    }

    /// Flight detail through the cache under `avail:<id>`.
    pub fn flight_detail(&self, flight_id: &str) -> Result<Arc<Value>, ServiceError> {
        let key = format!("avail:{flight_id}");
        self.cache
            .get_or_load(&key, TtlClass::Short, || {
                self.loads.fetch_add(1, Ordering::Relaxed);
                match self.get_flight(flight_id) {
                    Ok(f) => {
                        let mut v = serde_json::to_value(f).expect("flight serializes");
                        if let Some(o) = v.as_object_mut() {
                            o.remove("rev");
                        }
                        Ok(Arc::new(v))
                    }
                    // unknown ids are cached too, as null
                    Err(ServiceError::NotFound(_)) => Ok(Arc::new(Value::Null)),
                    Err(e) => Err(e),
                }
            })
            .map_err(ServiceError::from_load)
            .and_then(|v| match *v {
                Value::Null => Err(ServiceError::NotFound(format!("flight {flight_id}"))),
                _ => Ok(v),
            })
    }

    /// Flights on a route and date, sorted by departure then id, cached
    /// under `search:<origin>:<destination>:<date>`.
    pub fn search_flights(&self, origin: &str, destination: &str, date: &str) -> Result<Arc<Value>, ServiceError> {
        let key = format!("search:{origin}:{destination}:{date}");
        self.cache
            .get_or_load(&key, TtlClass::Short, || -> Result<Arc<Value>, ServiceError> {
                self.loads.fetch_add(1, Ordering::Relaxed);
                let mut docs = self.search.query(
                    SEARCH_COLLECTION,
                    &[
                        ("origin", json!(origin)),
                        ("destination", json!(destination)),
                        ("date", json!(date)),
                    ],
                )?;
                docs.sort_by(|a, b| {
                    (a["departure_ts"].as_u64(), a["flight_id"].as_str())
                        .cmp(&(b["departure_ts"].as_u64(), b["flight_id"].as_str()))
                });
                for d in &mut docs {
                    if let Some(o) = d.as_object_mut() {
                        o.remove("rev");
                    }
                }
                Ok(Arc::new(Value::Array(docs)))
            })
            .map_err(ServiceError::from_load)
    }

    /// Takes `seats` from the flight on behalf of `booking_id`. Repeating the
    /// call for the same booking is a no-op returning the first result.
    pub fn reserve_seats(&self, flight_id: &str, booking_id: &str, seats: u32) -> Result<SeatChange, ServiceError> {
        if seats == 0 {
            return Err(ServiceError::BadRequest("seats must be at least 1".into()));
        }
        let fkey = flight_key(flight_id);
        let rkey = resv_key(flight_id, booking_id);
        let (change, flight) = self.store.transact(DEFAULT_TXN_RETRIES, |t| {
            let mut flight = match t.get(&fkey) {
                Some(v) => decode_flight(v)?,
                None => return Err(ServiceError::NotFound(format!("flight {flight_id}"))),
            };
            if let Some(r) = t.get(&rkey) {
                let held = r["seats"].as_u64().unwrap_or(0) as u32;
                let change = SeatChange {
                    seats: held,
                    seats_available: flight.seats_available,
                    applied: false,
                };
                return Ok((change, flight));
            }
            if flight.seats_available < seats {
                return Err(ServiceError::InsufficientSeats {
                    available: flight.seats_available,
                    requested: seats,
                });
            }
            flight.seats_available -= seats;
            flight.rev += 1;
            t.set(&fkey, serde_json::to_value(&flight).expect("flight serializes"));
            t.set(&rkey, json!({"seats": seats}));
            let change = SeatChange {
                seats,
                seats_available: flight.seats_available,
                applied: true,
            };
            Ok((change, flight))
        })?;
        if change.applied {
            self.after_seat_change(flight_id, DomainEvent::SeatsReserved {
                flight_id: flight_id.to_string(),
                booking_id: booking_id.to_string(),
                seats,
                seats_available: flight.seats_available,
                rev: flight.rev,
            });
        }
        Ok(change)
    }

    /// Returns the seats held for `booking_id`. Releasing twice, or
    /// releasing a booking that never reserved, changes nothing.
    pub fn release_seats(&self, flight_id: &str, booking_id: &str) -> Result<SeatChange, ServiceError> {
        let fkey = flight_key(flight_id);
        let rkey = resv_key(flight_id, booking_id);
        let (change, flight) = self.store.transact(DEFAULT_TXN_RETRIES, |t| {
            let mut flight = match t.get(&fkey) {
                Some(v) => decode_flight(v)?,
                None => return Err(ServiceError::NotFound(format!("flight {flight_id}"))),
            };
            let Some(r) = t.get(&rkey) else {
                let change = SeatChange {
                    seats: 0,
                    seats_available: flight.seats_available,
                    applied: false,
                };
                return Ok((change, flight));
            };
            let held = r["seats"].as_u64().unwrap_or(0) as u32;
            let restored = flight.seats_available + held;
            if restored > flight.capacity {
                return Err(ServiceError::Corrupt(format!("release would exceed capacity on {flight_id}")));
            }
            flight.seats_available = restored;
            flight.rev += 1;
            t.set(&fkey, serde_json::to_value(&flight).expect("flight serializes"));
            t.delete(&rkey);
            let change = SeatChange {
                seats: held,
                seats_available: restored,
                applied: true,
            };
            Ok((change, flight))
        })?;
        if change.applied {
            self.after_seat_change(flight_id, DomainEvent::SeatsReleased {
                flight_id: flight_id.to_string(),
                booking_id: booking_id.to_string(),
                seats: change.seats,
                seats_available: flight.seats_available,
                rev: flight.rev,
            });
        }
        Ok(change)
    }

    fn after_seat_change(&self, flight_id: &str, event: DomainEvent) {
        self.cache.invalidate(&format!("avail:{flight_id}"));
        self.broker
            .publish(TOPIC_INVENTORY, flight_id.as_bytes(), &event.to_bytes())
            .expect("inventory topic exists");
    }

    /// Seats held per booking on one flight.
    pub fn reservations(&self, flight_id: &str) -> Vec<(String, u32)> {
        let prefix = format!("resv/{flight_id}/");
        self.store
            .scan_prefix(&prefix)
            .into_iter()
            .map(|(k, v)| (k[prefix.len()..].to_string(), v["seats"].as_u64().unwrap_or(0) as u32))
            .collect()
    }

    /// Flights and every reservation as (flight, booking, seats), read from
    /// one snapshot.
    pub fn inventory_snapshot(&self) -> Result<(Vec<Flight>, Vec<ReservationRow>), ServiceError> {
        let mut parts = self.store.scan_prefixes(&["flight/", "resv/"]).into_iter();
        let flights = parts
            .next()
            .unwrap_or_default()
            .into_iter()
            .map(|(_, v)| decode_flight(v))
            .collect::<Result<Vec<_>, _>>()?;
        let resv = parts
            .next()
            .unwrap_or_default()
            .into_iter()
            .filter_map(|(k, v)| {
                let rest = k.strip_prefix("resv/")?;
                let (flight, booking) = rest.split_once('/')?;
                Some((flight.to_string(), booking.to_string(), v["seats"].as_u64().unwrap_or(0) as u32))
            })
            .collect();
        Ok((flights, resv))
    }

    /// Applies an inventory event to the search documents. Events older
    /// than the stored revision are ignored, so replays and reordering are
    /// harmless.
    pub fn apply_inventory_event(&self, event: &DomainEvent) -> Result<(), ServiceError> {
        let (flight_id, seats_available, rev) = match event {
            DomainEvent::SeatsReserved {
                flight_id,
                seats_available,
                rev,
                ..
            }
            | DomainEvent::SeatsReleased {
                flight_id,
                seats_available,
                rev,
                ..
            } => (flight_id, *seats_available, *rev),
            _ => return Ok(()),
        };
        self.search.update(SEARCH_COLLECTION, flight_id, |doc| {
            let mut doc = doc?.clone();
            if doc["rev"].as_u64().unwrap_or(0) < rev {
                doc["seats_available"] = json!(seats_available);
                doc["rev"] = json!(rev);
            }
            Some(doc)
        })?;
        Ok(())
    }
}
