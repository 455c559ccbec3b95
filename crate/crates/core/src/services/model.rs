use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::auth::StoredCredential;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flight {
    pub flight_id: String,
    pub origin: String,
    pub destination: String,
    /// Unix seconds.
    pub departure_ts: u64,
    pub date: String,
    pub capacity: u32,
    pub seats_available: u32,
    /// Minor currency units per seat.
    pub price: u64,
    /// Bumped on every seat change; projections use it to drop stale events.
    #[serde(default)]
    pub rev: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BookingStatus {
    Pending,
    Confirmed,
    Cancelled,
    Compensated,
}

impl BookingStatus {
    pub fn is_terminal(self) -> bool {
        !matches!(self, BookingStatus::Pending)
    }

    /// Holds seats in the inventory.
    pub fn holds_seats(self) -> bool {
        matches!(self, BookingStatus::Pending | BookingStatus::Confirmed)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Booking {
    pub booking_id: String,
    pub user_id: String,
    pub flight_id: String,
    pub seats: u32,
    pub status: BookingStatus,
    pub payment_id: Option<String>,
    /// Nanoseconds on the testbed clock.
    pub created_ts: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PaymentStatus {
    Pending,
    Charged,
    Refunded,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payment {
    pub payment_id: String,
    pub booking_id: String,
    pub user_id: String,
    pub amount: u64,
    pub status: PaymentStatus,
}

/// Stored profile. The credential never leaves the profile service.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub name: String,
    pub credential: StoredCredential,
    pub preferences: Value,
    pub loyalty_points: u64,
    /// Bookings already credited with points, so replays credit nothing.
    #[serde(default)]
    pub awarded: BTreeSet<String>,
}

/// What the API returns for a profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileView {
    pub user_id: String,
    pub name: String,
    pub preferences: Value,
    pub loyalty_points: u64,
}

impl From<&UserProfile> for ProfileView {
    fn from(p: &UserProfile) -> Self {
        ProfileView {
            user_id: p.user_id.clone(),
            name: p.name.clone(),
            preferences: p.preferences.clone(),
            loyalty_points: p.loyalty_points,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NotificationKind {
    Email,
    Sms,
}

impl NotificationKind {
    pub fn queue(self) -> &'static str {
        match self {
            NotificationKind::Email => super::QUEUE_EMAIL,
            NotificationKind::Sms => super::QUEUE_SMS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NotificationRecord {
    pub notification_id: String,
    pub kind: NotificationKind,
    pub booking_id: String,
    pub sent_ts: u64,
}

/// Payload of a notification queue message.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NotificationRequest {
    pub booking_id: String,
    pub user_id: String,
    pub kind: NotificationKind,
}

/// Everything published on the `bookings`, `payments` and `inventory` topics.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum DomainEvent {
    BookingCreated {
        booking_id: String,
        user_id: String,
        flight_id: String,
        seats: u32,
    },
    BookingConfirmed {
        booking_id: String,
        user_id: String,
        payment_id: String,
    },
    BookingCompensated {
        booking_id: String,
        user_id: String,
        reason: String,
    },
    SeatsReserved {
        flight_id: String,
        booking_id: String,
        seats: u32,
        seats_available: u32,
        rev: u64,
    },
    SeatsReleased {
        flight_id: String,
        booking_id: String,
        seats: u32,
        seats_available: u32,
        rev: u64,
    },
    PaymentCharged {
        payment_id: String,
        booking_id: String,
        user_id: String,
        amount: u64,
    },
    PaymentFailed {
        payment_id: String,
        booking_id: String,
        user_id: String,
        amount: u64,
    },
    PaymentRefunded {
        payment_id: String,
        booking_id: String,
        user_id: String,
        amount: u64,
    },
}

impl DomainEvent {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("events serialize")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, serde_json::Error> {
        serde_json::from_slice(bytes)
    }

    pub fn booking_id(&self) -> &str {
        match self {
            DomainEvent::BookingCreated { booking_id, .. }
            | DomainEvent::BookingConfirmed { booking_id, .. }
            | DomainEvent::BookingCompensated { booking_id, .. }
            | DomainEvent::SeatsReserved { booking_id, .. }
            | DomainEvent::SeatsReleased { booking_id, .. }
            | DomainEvent::PaymentCharged { booking_id, .. }
            | DomainEvent::PaymentFailed { booking_id, .. }
            | DomainEvent::PaymentRefunded { booking_id, .. } => booking_id,
        }
    }
}
