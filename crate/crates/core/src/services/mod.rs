//! The five domain services and the wiring that puts them together.
//!
//! Each service owns its store: flight inventory, bookings and payments use
//! [`TxnStore`](crate::store::TxnStore); profiles, search documents and
//! notification records use [`DocumentStore`](crate::store::DocumentStore).
//! Services talk to each other through direct calls inside the booking
//! saga, through topics (`bookings`, `payments`, `inventory`) and through
//! the notification queues.

pub mod booking;
pub mod consumers;
pub mod fixtures;
pub mod flight;
pub mod model;
pub mod notification;
pub mod payment;
pub mod profile;

use std::sync::Arc;

use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::auth::{CredentialSource, TokenService};
use crate::broker::{Broker, DEFAULT_PARTITIONS};
use crate::cache::{LoadError, TtlCache};
use crate::clock::SharedClock;
use crate::ids::IdGen;
use crate::store::StoreError;

pub use booking::{BookingCounts, BookingResult, BookingService};
pub use fixtures::{FixtureConfig, FixtureSet};
pub use flight::FlightService;
pub use notification::NotificationService;
pub use payment::PaymentService;
pub use profile::ProfileService;

pub const TOPIC_BOOKINGS: &str = "bookings";
pub const TOPIC_PAYMENTS: &str = "payments";
pub const TOPIC_INVENTORY: &str = "inventory";
pub const QUEUE_EMAIL: &str = "notify.email";
pub const QUEUE_SMS: &str = "notify.sms";

pub const TOPICS: [&str; 3] = [TOPIC_BOOKINGS, TOPIC_PAYMENTS, TOPIC_INVENTORY];
pub const QUEUES: [&str; 2] = [QUEUE_EMAIL, QUEUE_SMS];

pub const DEFAULT_TOKEN_SECRET: &[u8] = b"skyway-testbed-secret";
pub const ADMIN_CLIENT_ID: &str = "ops-console";
pub const ADMIN_CLIENT_SECRET: &str = "ops-console-secret";

/// Cache shared by every service, holding JSON responses.
pub type SharedCache = Arc<TtlCache<Arc<Value>>>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ServiceError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("insufficient seats: {available} available, {requested} requested")]
    InsufficientSeats { available: u32, requested: u32 },
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("unavailable: {0}")]
    Unavailable(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("corrupt record: {0}")]
    Corrupt(String),
    #[error("{0}")]
    Stuck(String),
    #[error("internal: {0}")]
    Internal(String),
}

impl ServiceError {
    pub(crate) fn from_load(e: LoadError) -> Self {
        ServiceError::Unavailable(e.0)
    }
}

#[derive(Clone, Debug)]
pub struct TestbedConfig {
    pub seed: u64,
    pub payment_fail_prob: f64,
    pub fixtures: FixtureConfig,
    pub cache_capacity: usize,
    pub token_secret: Vec<u8>,
}

impl Default for TestbedConfig {
    fn default() -> Self {
        TestbedConfig {
            seed: 0,
            payment_fail_prob: 0.0,
            fixtures: FixtureConfig::default(),
            cache_capacity: crate::cache::DEFAULT_CAPACITY,
            token_secret: DEFAULT_TOKEN_SECRET.to_vec(),
        }
    }
}

/// Every service plus the shared infrastructure, on one clock.
#[derive(Debug)]
pub struct Testbed {
    pub clock: SharedClock,
    pub ids: Arc<IdGen>,
    pub broker: Arc<Broker>,
    pub cache: SharedCache,
    pub flights: Arc<FlightService>,
    pub payments: Arc<PaymentService>,
    pub profiles: Arc<ProfileService>,
    pub bookings: Arc<BookingService>,
    pub notifications: Arc<NotificationService>,
    pub tokens: Arc<TokenService>,
    pub fixtures: FixtureSet,
}

impl Testbed {
    /// Builds the services and loads the seeded fixtures.
    pub fn new(clock: SharedClock, config: &TestbedConfig) -> Self {
        let fixtures = fixtures::generate(config.seed, config.fixtures);
        let tb = Self::empty(clock, config);
        for f in &fixtures.flights {
            tb.flights.add_flight(f.clone()).expect("fixture flight loads");
        }
        for u in &fixtures.users {
            tb.profiles.add_user(u).expect("fixture user loads");
        }
        Testbed { fixtures, ..tb }
    }

    /// Services with topics and queues declared but no data.
    pub fn empty(clock: SharedClock, config: &TestbedConfig) -> Self {
        let broker = Arc::new(Broker::new(clock.clone()));
        for t in TOPICS {
            broker.create_topic(t, DEFAULT_PARTITIONS).expect("fresh broker");
        }
        for q in QUEUES {
            broker.declare_queue(q);
        }
        let cache: SharedCache = Arc::new(TtlCache::with_capacity(clock.clone(), config.cache_capacity));
        let flights = Arc::new(FlightService::new(cache.clone(), broker.clone()));
        let payments = Arc::new(PaymentService::new(
            broker.clone(),
            config.seed ^ 0x9a7_3e17,
            config.payment_fail_prob,
        ));
        let profiles = Arc::new(ProfileService::new(cache.clone()));
        let bookings = Arc::new(BookingService::new(
            clock.clone(),
            broker.clone(),
            flights.clone(),
            payments.clone(),
            profiles.clone(),
        ));
        let notifications = Arc::new(NotificationService::new(broker.clone(), clock.clone()));
        let creds: Arc<dyn CredentialSource> = profiles.clone();
        let tokens = Arc::new(TokenService::new(clock.clone(), &config.token_secret, creds));
        let mut admin_scopes = fixtures::USER_SCOPES.to_vec();
        admin_scopes.push("admin");
        tokens.register_client(ADMIN_CLIENT_ID, ADMIN_CLIENT_SECRET, &admin_scopes);
        Testbed {
            clock,
            ids: Arc::new(IdGen::new()),
            broker,
            cache,
            flights,
            payments,
            profiles,
            bookings,
            notifications,
            tokens,
            fixtures: FixtureSet {
                flights: Vec::new(),
                users: Vec::new(),
            },
        }
    }

    pub fn profile_section(&self, user_id: &str) -> Result<Value, ServiceError> {
        Ok((*self.profiles.get_profile(user_id)?).clone())
    }

    pub fn bookings_section(&self, user_id: &str) -> Result<Value, ServiceError> {
        let list = self.bookings.bookings_for_user(user_id)?;
        Ok(serde_json::to_value(list).expect("bookings serialize"))
    }

    /// Flights referenced by the user's bookings, once each, in id order.
    pub fn flights_section(&self, user_id: &str) -> Result<Value, ServiceError> {
        let mut ids: Vec<String> = self
            .bookings
            .bookings_for_user(user_id)?
            .into_iter()
            .map(|b| b.flight_id)
            .collect();
        ids.sort();
        ids.dedup();
        let flights = ids
            .iter()
            .map(|id| self.flights.flight_detail(id).map(|v| (*v).clone()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Value::Array(flights))
    }

    /// Payments referenced by the user's bookings, in booking order.
    pub fn payments_section(&self, user_id: &str) -> Result<Value, ServiceError> {
        let payments = self
            .bookings
            .bookings_for_user(user_id)?
            .into_iter()
            .filter_map(|b| b.payment_id)
            .map(|pid| self.payments.get_payment(&pid))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(serde_json::to_value(payments).expect("payments serialize"))
    }

    /// The whole trip of a user in one document.
    pub fn get_trip(&self, user_id: &str) -> Result<Value, ServiceError> {
        if !self.profiles.user_exists(user_id)? {
            return Err(ServiceError::NotFound(format!("user {user_id}")));
        }
        Ok(json!({
            "profile": self.profile_section(user_id)?,
            "bookings": self.bookings_section(user_id)?,
            "flights": self.flights_section(user_id)?,
            "payments": self.payments_section(user_id)?,
        }))
    }

    /// Digest over every service-owned store plus broker and queue state.
    /// Unchanged digest means no service-side effect happened.
    pub fn state_digest(&self) -> String {
        let mut h = Sha256::new();
        for part in [
            self.flights.store().snapshot_digest(),
            self.flights.search_store().snapshot_digest(),
            self.bookings.store().snapshot_digest(),
            self.payments.store().snapshot_digest(),
            self.profiles.docs().snapshot_digest(),
            self.notifications.docs().snapshot_digest(),
        ] {
            h.update(part.as_bytes());
            h.update(b"\n");
        }
        h.update(self.broker.published_count().to_le_bytes());
        for q in QUEUES {
            let d = self.broker.queue_depth(q);
            h.update(d.ready.to_le_bytes());
            h.update(d.in_flight.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
