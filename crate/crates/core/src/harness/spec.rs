//! Workload scenarios as read from JSON files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;

/// Requests the load generator can issue. Logins are issued on demand and
/// are not part of the mix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operation {
    SearchFlights,
    FlightDetail,
    CreateBooking,
    GetBookings,
    GetTrip,
    GetProfile,
    UpdateProfile,
}

impl Operation {
    pub const ALL: [Operation; 7] = [
        Operation::SearchFlights,
        Operation::FlightDetail,
        Operation::CreateBooking,
        Operation::GetBookings,
        Operation::GetTrip,
        Operation::GetProfile,
        Operation::UpdateProfile,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Operation::SearchFlights => "search_flights",
            Operation::FlightDetail => "flight_detail",
            Operation::CreateBooking => "create_booking",
            Operation::GetBookings => "get_bookings",
            Operation::GetTrip => "get_trip",
            Operation::GetProfile => "get_profile",
            Operation::UpdateProfile => "update_profile",
        }
    }

    /// Public operations need no token.
    pub fn is_public(self) -> bool {
        matches!(self, Operation::SearchFlights | Operation::FlightDetail)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Inproc,
    Http,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    #[default]
    Real,
    Virtual,
}

/// Extra delay between an event being published and a consumer seeing it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "distribution", rename_all = "lowercase", deny_unknown_fields)]
pub enum LatencyModel {
    /// `median_ms * exp(sigma * Z)` with standard normal `Z`.
    Lognormal { median_ms: f64, sigma: f64 },
    Constant { ms: f64 },
}

impl LatencyModel {
    /// Closed-form mean in milliseconds.
    pub fn mean_ms(&self) -> f64 {
        match *self {
            LatencyModel::Lognormal { median_ms, sigma } => median_ms * (sigma * sigma / 2.0).exp(),
            LatencyModel::Constant { ms } => ms,
        }
    }

    fn validate(&self) -> Result<(), String> {
        match *self {
            LatencyModel::Lognormal { median_ms, sigma } => {
                if !(median_ms.is_finite() && median_ms > 0.0) {
                    return Err("added_latency.median_ms must be positive".into());
                }
                if !(sigma.is_finite() && sigma >= 0.0) {
                    return Err("added_latency.sigma must be non-negative".into());
                }
            }
            LatencyModel::Constant { ms } => {
                if !(ms.is_finite() && ms >= 0.0) {
                    return Err("added_latency.ms must be non-negative".into());
                }
            }
        }
        Ok(())
    }
}

fn default_downtime_ms() -> u64 {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultConfig {
    #[serde(default)]
    pub payment_fail_prob: f64,
    /// Chance that a consumer batch or notification is delivered twice.
    #[serde(default)]
    pub duplicate_delivery_prob: f64,
    #[serde(default)]
    pub consumer_restart_period_s: Option<f64>,
    #[serde(default = "default_downtime_ms")]
    pub consumer_restart_downtime_ms: u64,
    #[serde(default)]
    pub added_latency: Option<LatencyModel>,
}

impl Default for FaultConfig {
    fn default() -> Self {
        FaultConfig {
            payment_fail_prob: 0.0,
            duplicate_delivery_prob: 0.0,
            consumer_restart_period_s: None,
            consumer_restart_downtime_ms: default_downtime_ms(),
            added_latency: None,
        }
    }
}

fn default_search_keys() -> usize {
    10_000
}

fn default_max_seats() -> u32 {
    2
}

fn default_workers() -> usize {
    8
}

fn default_sample_period_ms() -> u64 {
    100
}

/// One load scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub name: String,
    /// Steady-state seconds after the ramp.
    pub duration_s: f64,
    /// Seconds over which the arrival rate climbs linearly from zero.
    #[serde(default)]
    pub ramp_up_s: f64,
    /// Requests per second at steady state.
    pub arrival_rate: f64,
    pub mix: BTreeMap<Operation, f64>,
    /// Zipf exponent over flights and search keys; 0 is uniform.
    #[serde(default)]
    pub key_skew: f64,
    #[serde(default = "default_search_keys")]
    pub search_keys: usize,
    /// Seats per booking are drawn uniformly from `1..=max_seats`.
    #[serde(default = "default_max_seats")]
    pub max_seats: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub transport: TransportKind,
    #[serde(default)]
    pub clock: ClockMode,
    /// Concurrent clients in real-clock runs.
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_sample_period_ms")]
    pub sample_period_ms: u64,
    #[serde(default)]
    pub faults: FaultConfig,
}

fn prob(name: &str, p: f64) -> Result<(), String> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(format!("{name} must be within [0, 1], got {p}"))
    }
}

fn non_negative(name: &str, x: f64) -> Result<(), String> {
    if x.is_finite() && x >= 0.0 {
        Ok(())
    } else {
        Err(format!("{name} must be a non-negative number, got {x}"))
    }
}

impl WorkloadSpec {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let spec: WorkloadSpec = serde_json::from_str(text).map_err(|e| HarnessError::Rejected(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks every field; a spec that fails here never sends traffic.
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.check().map_err(HarnessError::Rejected)
    }

    fn check(&self) -> Result<(), String> {
        if self.name.trim().is_empty() {
            return Err("name must not be empty".into());
        }
        non_negative("duration_s", self.duration_s)?;
        non_negative("ramp_up_s", self.ramp_up_s)?;
        non_negative("arrival_rate", self.arrival_rate)?;
        non_negative("key_skew", self.key_skew)?;
        if self.mix.is_empty() {
            return Err("mix must name at least one operation".into());
        }
        for (op, f) in &self.mix {
            non_negative(&format!("mix.{}", op.name()), *f)?;
        }
        let total: f64 = self.mix.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(format!("mix fractions must sum to 1, got {total}"));
        }
        if self.search_keys == 0 {
            return Err("search_keys must be at least 1".into());
        }
        if self.max_seats == 0 {
            return Err("max_seats must be at least 1".into());
        }
        if self.workers == 0 {
            return Err("workers must be at least 1".into());
        }
        if self.sample_period_ms == 0 {
            return Err("sample_period_ms must be at least 1".into());
        }
        let f = &self.faults;
        prob("faults.payment_fail_prob", f.payment_fail_prob)?;
        prob("faults.duplicate_delivery_prob", f.duplicate_delivery_prob)?;
        if let Some(p) = f.consumer_restart_period_s {
            if !(p.is_finite() && p > 0.0) {
                return Err("faults.consumer_restart_period_s must be positive".into());
            }
        }
        if let Some(l) = &f.added_latency {
            l.validate()?;
        }
        if self.transport == TransportKind::Http && self.clock == ClockMode::Virtual {
            return Err("http transport needs the real clock".into());
        }
        Ok(())
    }

    /// Seconds during which requests are issued.
    pub fn load_secs(&self) -> f64 {
        self.ramp_up_s + self.duration_s
    }

    /// Arrival rate at `t` seconds into the run.
    pub fn rate_at(&self, t: f64) -> f64 {
        if t >= self.load_secs() {
            0.0
        } else if self.ramp_up_s > 0.0 && t < self.ramp_up_s {
            self.arrival_rate * t / self.ramp_up_s
        } else {
            self.arrival_rate
        }
    }
}
