//! Per-client token buckets.
//!
//! Tokens are kept in millionths so refill is exact integer arithmetic and
//! no rounding drift builds up over many small intervals.

use std::collections::HashMap;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::clock::{SharedClock, Timestamp};

const MICRO: u64 = 1_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketConfig {
    pub capacity: u64,
    /// Tokens added per second.
    pub refill_rate: u64,
}

impl Default for BucketConfig {
    fn default() -> Self {
        BucketConfig {
            capacity: 100,
            refill_rate: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Allow,
    Deny,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RateLimitBucket {
    pub client_id: String,
    pub capacity: u64,
    pub refill_rate: u64,
    tokens_micro: u64,
    /// Sub-micro-token remainder of the last refill, in ns·rate units.
    carry: u64,
    pub last_refill: Timestamp,
}

impl RateLimitBucket {
    fn new(client_id: &str, cfg: BucketConfig, now: Timestamp) -> Self {
        RateLimitBucket {
            client_id: client_id.to_string(),
            capacity: cfg.capacity,
            refill_rate: cfg.refill_rate,
            tokens_micro: cfg.capacity * MICRO,
            carry: 0,
            last_refill: now,
        }
    }

    /// Current level in whole-token units (fractional).
    pub fn tokens(&self) -> f64 {
        self.tokens_micro as f64 / MICRO as f64
    }

    fn refill(&mut self, now: Timestamp) {
        let elapsed = now.as_nanos().saturating_sub(self.last_refill.as_nanos());
        self.last_refill = self.last_refill.max(now);
        let cap = self.capacity * MICRO;
        if self.tokens_micro >= cap {
            self.carry = 0;
            return;
        }
        // micro-tokens = ns * rate / 1000, with the remainder carried over
        let units = u128::from(elapsed) * u128::from(self.refill_rate) + u128::from(self.carry);
        let add = units / 1000;
        self.carry = (units % 1000) as u64;
        let level = u128::from(self.tokens_micro) + add;
        if level >= u128::from(cap) {
            self.tokens_micro = cap;
            self.carry = 0;
        } else {
            self.tokens_micro = level as u64;
        }
    }

    fn try_take(&mut self, now: Timestamp) -> Decision {
        self.refill(now);
        if self.tokens_micro >= MICRO {
            self.tokens_micro -= MICRO;
            Decision::Allow
        } else {
            Decision::Deny
        }
    }
}

#[derive(Debug)]
pub struct RateLimiter {
    clock: SharedClock,
    config: BucketConfig,
    buckets: Mutex<HashMap<String, RateLimitBucket>>,
}

impl RateLimiter {
    pub fn new(clock: SharedClock, config: BucketConfig) -> Self {
        RateLimiter {
            clock,
            config,
            buckets: Mutex::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> BucketConfig {
        self.config
    }

    /// Refills the client's bucket, then takes one token if a whole token
    /// is available. A denial consumes nothing.
    pub fn check_rate(&self, client_id: &str) -> Decision {
        let now = self.clock.now();
        let mut buckets = self.buckets.lock();
        if let Some(b) = buckets.get_mut(client_id) {
            return b.try_take(now);
        }
        let mut b = RateLimitBucket::new(client_id, self.config, now);
        let d = b.try_take(now);
        buckets.insert(client_id.to_string(), b);
        d
    }

    pub fn bucket(&self, client_id: &str) -> Option<RateLimitBucket> {
        self.buckets.lock().get(client_id).cloned()
    }
}
