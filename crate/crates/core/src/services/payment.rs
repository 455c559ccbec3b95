//! Payments with seeded failure injection.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use super::model::{DomainEvent, Payment, PaymentStatus};
use super::{ServiceError, TOPIC_PAYMENTS};
use crate::broker::Broker;
use crate::store::{TxnStore, DEFAULT_TXN_RETRIES};

fn payment_key(id: &str) -> String {
    format!("payment/{id}")
}

/// Payment id derived from the booking so repeated charges find the first.
pub fn payment_id_for(booking_id: &str) -> String {
    format!("pay-{}", booking_id.strip_prefix("bk-").unwrap_or(booking_id))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ChargeOutcome {
    Charged(String),
    Failed(String),
}

#[derive(Debug)]
pub struct PaymentService {
    store: TxnStore,
    broker: Arc<Broker>,
    rng: Mutex<ChaCha8Rng>,
    p_fail_bits: AtomicU64,
    available: AtomicBool,
    attempts: AtomicU64,
    injected_failures: AtomicU64,
}

fn decode(v: Value) -> Result<Payment, ServiceError> {
    serde_json::from_value(v).map_err(|e| ServiceError::Corrupt(e.to_string()))
}

impl PaymentService {
    pub fn new(broker: Arc<Broker>, seed: u64, p_fail: f64) -> Self {
        PaymentService {
            store: TxnStore::new(),
            broker,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
            p_fail_bits: AtomicU64::new(p_fail.clamp(0.0, 1.0).to_bits()),
            available: AtomicBool::new(true),
            attempts: AtomicU64::new(0),
            injected_failures: AtomicU64::new(0),
        }
    }

    pub fn store(&self) -> &TxnStore {
        &self.store
    }

    pub fn set_fail_probability(&self, p: f64) {
        self.p_fail_bits.store(p.clamp(0.0, 1.0).to_bits(), Ordering::Relaxed);
    }

    pub fn fail_probability(&self) -> f64 {
        f64::from_bits(self.p_fail_bits.load(Ordering::Relaxed))
    }

    /// Simulates the whole service being down: every call returns
    /// `Unavailable` without touching state.
    pub fn set_available(&self, up: bool) {
        self.available.store(up, Ordering::SeqCst);
    }

    /// Charges that reached the failure draw.
    pub fn attempts(&self) -> u64 {
        self.attempts.load(Ordering::Relaxed)
    }

    pub fn injected_failures(&self) -> u64 {
        self.injected_failures.load(Ordering::Relaxed)
    }

    fn check_up(&self) -> Result<(), ServiceError> {
        if self.available.load(Ordering::SeqCst) {
            Ok(())
        } else {
            Err(ServiceError::Unavailable("payment service".into()))
        }
    }

    /// Charges `amount` for a booking. A repeat call for the same booking
    /// returns the recorded outcome without drawing again.
    pub fn charge(&self, booking_id: &str, user_id: &str, amount: u64) -> Result<ChargeOutcome, ServiceError> {
        self.check_up()?;
        let payment_id = payment_id_for(booking_id);
        let key = payment_key(&payment_id);
        if let Some(existing) = self.store.get(&key) {
            let p = decode(existing)?;
            return Ok(match p.status {
                PaymentStatus::Failed => ChargeOutcome::Failed(payment_id),
                _ => ChargeOutcome::Charged(payment_id),
            });
        }

        let failed = {
            let p = self.fail_probability();
            let draw: f64 = self.rng.lock().random();
            draw < p
        };
        self.attempts.fetch_add(1, Ordering::Relaxed);
        if failed {
            self.injected_failures.fetch_add(1, Ordering::Relaxed);
        }
        let status = if failed {
            PaymentStatus::Failed
        } else {
            PaymentStatus::Charged
        };
        let payment = Payment {
            payment_id: payment_id.clone(),
            booking_id: booking_id.to_string(),
            user_id: user_id.to_string(),
            amount,
            status,
        };
        let value = serde_json::to_value(&payment).expect("payment serializes");
        let inserted = self.store.transact(DEFAULT_TXN_RETRIES, |t| -> Result<bool, ServiceError> {
            if t.get(&key).is_some() {
                return Ok(false);
            }
            t.set(&key, value.clone());
            Ok(true)
        })?;
        if !inserted {
            // a concurrent duplicate won; report what it recorded
            return self.charge(booking_id, user_id, amount);
        }
        let event = if failed {
            DomainEvent::PaymentFailed {
                payment_id: payment_id.clone(),
                booking_id: booking_id.to_string(),
                user_id: user_id.to_string(),
                amount,
            }
        } else {
            DomainEvent::PaymentCharged {
                payment_id: payment_id.clone(),
                booking_id: booking_id.to_string(),
                user_id: user_id.to_string(),
                amount,
            }
        };
        self.publish(&event);
        Ok(if failed {
            ChargeOutcome::Failed(payment_id)
        } else {
            ChargeOutcome::Charged(payment_id)
        })
    }

    /// Refunds a charged payment. Refunding again is a no-op; refunding a
    /// payment that was never charged is `InvalidState`.
    pub fn refund(&self, payment_id: &str) -> Result<Payment, ServiceError> {
        self.check_up()?;
        let key = payment_key(payment_id);
        let (payment, changed) = self.store.transact(DEFAULT_TXN_RETRIES, |t| {
            let Some(v) = t.get(&key) else {
                return Err(ServiceError::NotFound(format!("payment {payment_id}")));
            };
            let mut p = decode(v)?;
            match p.status {
                PaymentStatus::Refunded => Ok((p, false)),
                PaymentStatus::Charged => {
                    p.status = PaymentStatus::Refunded;
                    t.set(&key, serde_json::to_value(&p).expect("payment serializes"));
                    Ok((p, true))
                }
                other => Err(ServiceError::InvalidState(format!("cannot refund a {other:?} payment"))),
            }
        })?;
        if changed {
            self.publish(&DomainEvent::PaymentRefunded {
                payment_id: payment.payment_id.clone(),
                booking_id: payment.booking_id.clone(),
                user_id: payment.user_id.clone(),
                amount: payment.amount,
            });
        }
        Ok(payment)
    }

    pub fn get_payment(&self, payment_id: &str) -> Result<Payment, ServiceError> {
        self.check_up()?;
        match self.store.get(&payment_key(payment_id)) {
            Some(v) => decode(v),
            None => Err(ServiceError::NotFound(format!("payment {payment_id}"))),
        }
    }

    /// Every payment, for consistency checks.
    pub fn all_payments(&self) -> Result<Vec<Payment>, ServiceError> {
        self.store
            .scan_prefix("payment/")
            .into_iter()
            .map(|(_, v)| decode(v))
            .collect()
    }

    fn publish(&self, event: &DomainEvent) {
        self.broker
            .publish(TOPIC_PAYMENTS, event.booking_id().as_bytes(), &event.to_bytes())
            .expect("payments topic exists");
    }
}
