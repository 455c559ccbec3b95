//! Oracles and fixtures shared by the integration tests and the acceptance
//! suite. Nothing here calls into the code under test for its answers.

#![allow(dead_code)]

pub mod props;

use std::sync::Arc;

use serde_json::json;
use sha2::{Digest, Sha256};
use skyway::clock::{Clock, Timestamp, VirtualClock};
use skyway::gateway::{Gateway, Request};
use skyway::services::model::Flight;
use skyway::services::{FixtureConfig, Testbed, TestbedConfig};

/// Token-bucket simulation over exact integers: one token is `1e9` units
/// and `ns` nanoseconds at `rate` tokens/s add `ns * rate` units.
pub fn bucket_oracle(arrivals_ns: &[u64], capacity: u64, rate: u64) -> Vec<bool> {
    let unit: u128 = 1_000_000_000;
    let cap = u128::from(capacity) * unit;
    let mut level = cap;
    let mut last = arrivals_ns.first().copied().unwrap_or(0);
    arrivals_ns
        .iter()
        .map(|&t| {
            level = (level + u128::from(t - last) * u128::from(rate)).min(cap);
            last = t;
            if level >= unit {
                level -= unit;
                true
            } else {
                false
            }
        })
        .collect()
}

/// Evenly spaced arrivals at `rate` per second over `[start, start + secs)`.
pub fn uniform_arrivals(start_ns: u64, rate: u64, secs: u64) -> Vec<u64> {
    (0..rate * secs).map(|i| start_ns + i * 1_000_000_000 / rate).collect()
}

/// RFC 2104 HMAC over SHA-256, written out by hand.
pub fn reference_hmac_sha256(key: &[u8], msg: &[u8]) -> [u8; 32] {
    const BLOCK: usize = 64;
    let mut k = [0u8; BLOCK];
    if key.len() > BLOCK {
        k[..32].copy_from_slice(&Sha256::digest(key));
    } else {
        k[..key.len()].copy_from_slice(key);
    }
    let ipad: Vec<u8> = k.iter().map(|b| b ^ 0x36).collect();
    let opad: Vec<u8> = k.iter().map(|b| b ^ 0x5c).collect();
    let inner = Sha256::new().chain_update(&ipad).chain_update(msg).finalize();
    Sha256::new().chain_update(&opad).chain_update(inner).finalize().into()
}

pub fn flight(id: &str, capacity: u32) -> Flight {
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

/// Small testbed on a virtual clock: 5 users, three flights.
pub fn small_gateway(p_fail: f64) -> (VirtualClock, Arc<Testbed>, Gateway) {
    let vc = VirtualClock::new();
    let cfg = TestbedConfig {
        seed: 5,
        payment_fail_prob: p_fail,
        fixtures: FixtureConfig {
            flights: 0,
            users: 5,
            days: 30,
        },
        ..TestbedConfig::default()
    };
    let tb = Arc::new(Testbed::new(vc.shared(), &cfg));
    tb.flights.add_flight(flight("F100", 100)).unwrap();
    tb.flights.add_flight(flight("F5000", 5000)).unwrap();
    tb.flights.add_flight(flight("F2", 2)).unwrap();
    let gw = Gateway::new(tb.clone());
    (vc, tb, gw)
}

pub fn login(gw: &Gateway, user: &str, scope: &str) -> String {
    let resp = gw.dispatch(
        &Request::post(
            "/v1/auth/token",
            json!({"grant_type": "password", "username": user, "password": format!("pw-{user}"), "scope": scope}),
        )
        .from_source("login"),
    );
    assert_eq!(resp.status, 200, "{:?}", resp.body);
    resp.body["access_token"].as_str().unwrap().to_string()
}

/// Outcome of offering evenly spaced booking requests through the gateway.
#[derive(Debug)]
pub struct RateExperiment {
    pub accepted: usize,
    pub rejected: usize,
    /// Accept/deny per measured request, in arrival order.
    pub decisions: Vec<bool>,
    pub arrivals_ns: Vec<u64>,
    /// Rejected requests after which some store digest changed.
    pub rejected_with_effect: usize,
}

/// Offers `rate` req/s of booking requests from one client for `warmup`
/// seconds, then measures the next `secs` seconds. Every rejected request is
/// bracketed by state digests.
pub fn rate_limit_experiment(rate: u64, warmup: u64, secs: u64) -> RateExperiment {
    let (vc, tb, gw) = small_gateway(0.0);
    let token = login(&gw, "u0001", "booking.write booking.read");
    let start = vc.now().as_nanos() + 1_000_000_000;
    let arrivals = uniform_arrivals(start, rate, warmup + secs);
    let measured_from = (rate * warmup) as usize;
    let mut before = tb.state_digest();
    let mut out = RateExperiment {
        accepted: 0,
        rejected: 0,
        decisions: Vec::new(),
        arrivals_ns: arrivals[measured_from..].to_vec(),
        rejected_with_effect: 0,
    };
    for (i, &t) in arrivals.iter().enumerate() {
        vc.advance_to(Timestamp(t));
        let req = Request::post("/v1/bookings", json!({"flight_id": "F5000", "seats": 1})).bearer(&token);
        let resp = gw.dispatch(&req);
        let after = tb.state_digest();
        let limited = resp.status == 429;
        if limited && after != before {
            out.rejected_with_effect += 1;
        }
        if !limited {
            assert!(resp.status == 201 || resp.status == 200, "{:?}", resp.body);
        }
        before = after;
        if i >= measured_from {
            out.decisions.push(!limited);
            if limited {
                out.rejected += 1;
            } else {
                out.accepted += 1;
            }
        }
    }
    out
}
