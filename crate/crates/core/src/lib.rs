//! Self-contained airline reservation microservices testbed.
//!
//! The crate wires five domain services (flights, bookings, payments,
//! profiles, notifications) behind an API gateway, on top of embedded
//! infrastructure: a topic/queue broker, a document store, an optimistic
//! transactional store, a TTL cache, and an HMAC token service. The
//! [`harness`] drives seeded workloads against the whole system and reports
//! throughput, latency, propagation, cache, error, consistency and
//! availability metrics.

pub mod broker;
pub mod clock;
pub mod ids;
pub mod store;
pub mod cache;
pub mod txn;
pub mod auth;
pub mod services;
pub mod gateway;
pub mod harness;
pub mod http;
