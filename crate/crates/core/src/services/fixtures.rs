//! Seeded fixture data: flights between a fixed set of airports and a
//! population of users with known passwords.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::model::{Flight, UserProfile};
use crate::auth::StoredCredential;

pub const AIRPORTS: [&str; 20] = [
    "AMS", "ATL", "BKK", "CDG", "DAC", "DEL", "DFW", "DXB", "FRA", "HND", "ICN", "IST", "JFK", "LAX", "LHR",
    "MAD", "PVG", "SIN", "SYD", "YYZ",
];

/// Scopes every fixture user holds.
pub const USER_SCOPES: [&str; 5] = [
    "booking.read",
    "booking.write",
    "payment.read",
    "profile.read",
    "profile.write",
];

/// 2026-01-01T00:00:00Z.
const SCHEDULE_START_UNIX: u64 = 1_767_225_600;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FixtureConfig {
    pub flights: usize,
    pub users: usize,
    /// Departure dates span this many days from the schedule start.
    pub days: u32,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            flights: 200,
            users: 1000,
            days: 30,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixtureSet {
    pub flights: Vec<Flight>,
    pub users: Vec<UserProfile>,
}

impl FixtureSet {
    pub fn flight_ids(&self) -> Vec<String> {
        self.flights.iter().map(|f| f.flight_id.clone()).collect()
    }

    pub fn user_ids(&self) -> Vec<String> {
        self.users.iter().map(|u| u.user_id.clone()).collect()
    }
}

pub fn date_for_day(day: u32) -> String {
    format!("2026-01-{:02}", day + 1)
}

pub fn user_id(n: usize) -> String {
    format!("u{n:04}")
}

pub fn password_for(user_id: &str) -> String {
    format!("pw-{user_id}")
}

/// Every (origin, destination, date) triple the fixtures could cover, in a
/// seed-dependent order. Used as the search-key universe.
pub fn search_universe(seed: u64, days: u32) -> Vec<(String, String, String)> {
    let mut keys = Vec::with_capacity(AIRPORTS.len() * (AIRPORTS.len() - 1) * days as usize);
    for o in AIRPORTS {
        for d in AIRPORTS {
            if o == d {
                continue;
            }
            for day in 0..days {
                keys.push((o.to_string(), d.to_string(), date_for_day(day)));
            }
        }
    }
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5ea7c4));
    keys
}

pub fn generate(seed: u64, cfg: FixtureConfig) -> FixtureSet {
    assert!(cfg.days >= 1 && cfg.days <= 31, "dates stay within January");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flights = (1..=cfg.flights)
        .map(|n| {
            let o = rng.random_range(0..AIRPORTS.len());
            let mut d = rng.random_range(0..AIRPORTS.len() - 1);
            if d >= o {
                d += 1;
            }
            let day = rng.random_range(0..cfg.days);
            let hour = rng.random_range(0..24u64);
            let capacity = rng.random_range(150..=350u32);
            Flight {
                flight_id: format!("FL{n:04}"),
                origin: AIRPORTS[o].to_string(),
                destination: AIRPORTS[d].to_string(),
                departure_ts: SCHEDULE_START_UNIX + u64::from(day) * 86_400 + hour * 3600,
                date: date_for_day(day),
                capacity,
                seats_available: capacity,
                price: rng.random_range(50..=900u64) * 100,
                rev: 0,
            }
        })
        .collect();
    let users = (1..=cfg.users)
        .map(|n| {
            let id = user_id(n);
            let notify = if rng.random_bool(0.2) { "sms" } else { "email" };
            let seat = if rng.random_bool(0.5) { "aisle" } else { "window" };
            UserProfile {
                name: format!("Traveller {n}"),
                credential: StoredCredential::new(&format!("salt-{id}"), &password_for(&id), &USER_SCOPES),
                preferences: json!({"notify": notify, "seat": seat}),
                loyalty_points: 0,
                awarded: Default::default(),
                user_id: id,
            }
        })
        .collect();
    FixtureSet { flights, users }
}
