//! Injectable time sources.
//!
//! Everything that reads time (cache expiry, token lifetimes, visibility
//! timeouts, rate-limit refill, propagation stamps) goes through [`Clock`], so
//! the same code runs against the wall clock or a [`VirtualClock`] that only
//! moves when told to.

use std::fmt;
use std::ops::{Add, Sub};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

/// Monotonic timestamp in nanoseconds since the clock's origin.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub fn from_millis(ms: u64) -> Self {
        Timestamp(ms * 1_000_000)
    }

    pub fn as_nanos(self) -> u64 {
        self.0
    }

    /// Elapsed time since `earlier`, zero if `earlier` is in the future.
    pub fn saturating_since(self, earlier: Timestamp) -> Duration {
        Duration::from_nanos(self.0.saturating_sub(earlier.0))
    }
}

impl Add<Duration> for Timestamp {
    type Output = Timestamp;

    fn add(self, rhs: Duration) -> Timestamp {
        Timestamp(self.0.saturating_add(rhs.as_nanos() as u64))
    }
}

impl Sub<Duration> for Timestamp {
    type Output = Timestamp;

    fn sub(self, rhs: Duration) -> Timestamp {
        Timestamp(self.0.saturating_sub(rhs.as_nanos() as u64))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

pub trait Clock: Send + Sync + fmt::Debug {
    fn now(&self) -> Timestamp;

    /// Wall-clock seconds since the Unix epoch, used for token `iat`/`exp`.
    fn unix_secs(&self) -> u64;

    /// Blocks (real) or advances time (virtual).
    fn sleep(&self, d: Duration);

    fn is_virtual(&self) -> bool;
}

pub type SharedClock = Arc<dyn Clock>;

#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        SystemClock {
            origin: Instant::now(),
        }
    }

    pub fn shared() -> SharedClock {
        Arc::new(SystemClock::new())
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.origin.elapsed().as_nanos() as u64)
    }

    fn unix_secs(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0)
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d)
    }

    fn is_virtual(&self) -> bool {
        false
    }
}

/// Unix time that virtual clocks report at `Timestamp::ZERO`.
pub const DEFAULT_VIRTUAL_EPOCH_SECS: u64 = 1_700_000_000;

/// Logical clock that only moves through [`VirtualClock::advance`],
/// [`VirtualClock::advance_to`] or [`Clock::sleep`].
#[derive(Clone, Debug)]
pub struct VirtualClock {
    now_ns: Arc<AtomicU64>,
    epoch_secs: u64,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::with_epoch(DEFAULT_VIRTUAL_EPOCH_SECS)
    }

    pub fn with_epoch(epoch_secs: u64) -> Self {
        VirtualClock {
            now_ns: Arc::new(AtomicU64::new(0)),
            epoch_secs,
        }
    }

    pub fn shared(&self) -> SharedClock {
        Arc::new(self.clone())
    }

    pub fn advance(&self, d: Duration) {
        self.now_ns.fetch_add(d.as_nanos() as u64, Ordering::AcqRel);
    }

    /// Moves time forward to `t`; never moves it backwards.
    pub fn advance_to(&self, t: Timestamp) {
        self.now_ns.fetch_max(t.0, Ordering::AcqRel);
    }
}

impl Default for VirtualClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.now_ns.load(Ordering::Acquire))
    }

    fn unix_secs(&self) -> u64 {
        self.epoch_secs + self.now().0 / 1_000_000_000
    }

    fn sleep(&self, d: Duration) {
        self.advance(d)
    }

    fn is_virtual(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_clock_moves_only_when_told() {
        let clock = VirtualClock::new();
        assert_eq!(clock.now(), Timestamp::ZERO);
        clock.advance(Duration::from_millis(5));
        assert_eq!(clock.now(), Timestamp::from_millis(5));
        clock.advance_to(Timestamp::from_millis(3));
        assert_eq!(clock.now(), Timestamp::from_millis(5));
        clock.sleep(Duration::from_secs(1));
        assert_eq!(clock.unix_secs(), DEFAULT_VIRTUAL_EPOCH_SECS + 1);
    }

    #[test]
    fn clones_share_time() {
        let a = VirtualClock::new();
        let b = a.shared();
        a.advance(Duration::from_nanos(7));
        assert_eq!(b.now().as_nanos(), 7);
    }

    #[test]
    fn system_clock_is_monotonic() {
        let clock = SystemClock::new();
        let t0 = clock.now();
        let t1 = clock.now();
        assert!(t1 >= t0);
        assert!(clock.unix_secs() > DEFAULT_VIRTUAL_EPOCH_SECS);
    }
}
