//! User profiles and the read models fed by booking and payment events.

use std::sync::Arc;

use serde_json::{json, Value};

use super::model::{BookingStatus, DomainEvent, NotificationKind, ProfileView, UserProfile};
use super::{ServiceError, SharedCache};
use crate::auth::{CredentialSource, StoredCredential};
use crate::cache::TtlClass;
use crate::store::DocumentStore;

const USERS: &str = "users";
const TRIP_VIEW: &str = "trip_view";
const PAYMENT_HISTORY: &str = "payment_history";

/// Points credited per confirmed booking.
pub const LOYALTY_POINTS_PER_BOOKING: u64 = 100;

#[derive(Debug)]
pub struct ProfileService {
    docs: DocumentStore,
    cache: SharedCache,
}

fn decode(v: Value) -> Result<UserProfile, ServiceError> {
    serde_json::from_value(v).map_err(|e| ServiceError::Corrupt(e.to_string()))
}

fn status_rank(s: BookingStatus) -> u8 {
    match s {
        BookingStatus::Pending => 0,
        _ => 1,
    }
}

impl ProfileService {
    pub fn new(cache: SharedCache) -> Self {
        ProfileService {
            docs: DocumentStore::new(),
            cache,
        }
    }

    pub fn docs(&self) -> &DocumentStore {
        &self.docs
    }

    pub fn add_user(&self, profile: &UserProfile) -> Result<(), ServiceError> {
        let v = serde_json::to_value(profile).expect("profile serializes");
        self.docs.put(USERS, &profile.user_id, v)?;
        self.cache.invalidate(&format!("user:{}", profile.user_id));
        Ok(())
    }

    pub fn user_exists(&self, user_id: &str) -> Result<bool, ServiceError> {
        Ok(self.docs.get(USERS, user_id)?.is_some())
    }

    /// Profile as the API shows it, cached under `user:<id>` with the long TTL.
    pub fn get_profile(&self, user_id: &str) -> Result<Arc<Value>, ServiceError> {
        self.cache
            .get_or_load(&format!("user:{user_id}"), TtlClass::Long, || match self.load(user_id) {
                Ok(p) => Ok(Arc::new(serde_json::to_value(ProfileView::from(&p)).expect("view serializes"))),
                // unknown users are cached too, as null
                Err(ServiceError::NotFound(_)) => Ok(Arc::new(Value::Null)),
                Err(e) => Err(e),
            })
            .map_err(ServiceError::from_load)
            .and_then(|v| match *v {
                Value::Null => Err(ServiceError::NotFound(format!("user {user_id}"))),
                _ => Ok(v),
            })
    }

    fn load(&self, user_id: &str) -> Result<UserProfile, ServiceError> {
        match self.docs.get(USERS, user_id)? {
            Some(v) => decode(v),
            None => Err(ServiceError::NotFound(format!("user {user_id}"))),
        }
    }

    /// Applies `{name?, preferences?}`. Other fields are rejected.
    pub fn update_profile(&self, user_id: &str, patch: &Value) -> Result<Arc<Value>, ServiceError> {
        let Some(fields) = patch.as_object() else {
            return Err(ServiceError::BadRequest("profile patch must be an object".into()));
        };
        for (k, v) in fields {
            match (k.as_str(), v) {
                ("name", Value::String(_)) | ("preferences", Value::Object(_)) => {}
                ("name" | "preferences", _) => {
                    return Err(ServiceError::BadRequest(format!("field {k} has the wrong type")));
                }
                _ => return Err(ServiceError::BadRequest(format!("field {k} cannot be updated"))),
            }
        }
        let mut missing = false;
        self.docs.update(USERS, user_id, |doc| {
            let Some(doc) = doc else {
                missing = true;
                return None;
            };
            let mut doc = doc.clone();
            for (k, v) in fields {
                doc[k] = v.clone();
            }
            Some(doc)
        })?;
        if missing {
            return Err(ServiceError::NotFound(format!("user {user_id}")));
        }
        self.cache.invalidate(&format!("user:{user_id}"));
        self.get_profile(user_id)
    }

    /// Preferred notification channel; email unless the profile says sms.
    pub fn notification_kind(&self, user_id: &str) -> NotificationKind {
        match self.load(user_id) {
            Ok(p) if p.preferences["notify"] == "sms" => NotificationKind::Sms,
            _ => NotificationKind::Email,
        }
    }

    /// Booking statuses as seen by the trip projection.
    pub fn trip_view(&self, user_id: &str) -> Result<Option<Value>, ServiceError> {
        Ok(self.docs.get(TRIP_VIEW, user_id)?)
    }

    pub fn all_trip_views(&self) -> Result<Vec<Value>, ServiceError> {
        Ok(self.docs.all(TRIP_VIEW)?.into_values().collect())
    }

    /// Trip projection. Status only moves forward, so replayed or late
    /// events never undo a later state.
    pub fn apply_trip_event(&self, event: &DomainEvent) -> Result<(), ServiceError> {
        let (user_id, booking_id, status) = match event {
            DomainEvent::BookingCreated { user_id, booking_id, .. } => (user_id, booking_id, BookingStatus::Pending),
            DomainEvent::BookingConfirmed { user_id, booking_id, .. } => {
                (user_id, booking_id, BookingStatus::Confirmed)
            }
            DomainEvent::BookingCompensated { user_id, booking_id, .. } => {
                (user_id, booking_id, BookingStatus::Compensated)
            }
            _ => return Ok(()),
        };
        self.docs.update(TRIP_VIEW, user_id, |doc| {
            let mut doc = doc
                .cloned()
                .unwrap_or_else(|| json!({"user_id": user_id, "bookings": {}}));
            let current = doc["bookings"][booking_id.as_str()]
                .as_str()
                .and_then(|s| serde_json::from_value::<BookingStatus>(json!(s)).ok());
            if current.is_some_and(|c| status_rank(c) >= status_rank(status)) {
                return None;
            }
            if !doc["bookings"].is_object() {
                doc["bookings"] = json!({});
            }
            doc["bookings"][booking_id.as_str()] = json!(status);
            Some(doc)
        })?;
        Ok(())
    }

    /// Loyalty projection: credits each confirmed booking once.
    pub fn apply_loyalty_event(&self, event: &DomainEvent) -> Result<(), ServiceError> {
        let DomainEvent::BookingConfirmed { user_id, booking_id, .. } = event else {
            return Ok(());
        };
        let mut changed = false;
        self.docs.update(USERS, user_id, |doc| {
            let mut p: UserProfile = serde_json::from_value(doc?.clone()).ok()?;
            if !p.awarded.insert(booking_id.clone()) {
                return None;
            }
            p.loyalty_points += LOYALTY_POINTS_PER_BOOKING;
            changed = true;
            Some(serde_json::to_value(p).expect("profile serializes"))
        })?;
        if changed {
            self.cache.invalidate(&format!("user:{user_id}"));
        }
        Ok(())
    }

    /// Payment history projection keyed by payment id; last event wins.
    pub fn apply_payment_event(&self, event: &DomainEvent) -> Result<(), ServiceError> {
        let (payment_id, booking_id, user_id, amount, status) = match event {
            DomainEvent::PaymentCharged {
                payment_id,
                booking_id,
                user_id,
                amount,
            } => (payment_id, booking_id, user_id, amount, "Charged"),
            DomainEvent::PaymentFailed {
                payment_id,
                booking_id,
                user_id,
                amount,
            } => (payment_id, booking_id, user_id, amount, "Failed"),
            DomainEvent::PaymentRefunded {
                payment_id,
                booking_id,
                user_id,
                amount,
            } => (payment_id, booking_id, user_id, amount, "Refunded"),
            _ => return Ok(()),
        };
        self.docs.update(PAYMENT_HISTORY, payment_id, |doc| {
            // refunds are final; a replayed charge must not resurrect it
            if doc.is_some_and(|d| d["status"] == "Refunded") {
                return None;
            }
            Some(json!({
                "payment_id": payment_id,
                "booking_id": booking_id,
                "user_id": user_id,
                "amount": amount,
                "status": status,
            }))
        })?;
        Ok(())
    }
}

/// Credential lookup backed by the profile documents.
impl CredentialSource for ProfileService {
    fn credential(&self, user: &str) -> Option<StoredCredential> {
        self.load(user).ok().map(|p| p.credential)
    }
}
