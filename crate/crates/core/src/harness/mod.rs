//! Load harness: seeded workloads, fault injection, metrics and verdicts.
//!
//! A run builds a fresh [`Testbed`] from the scenario seed, drives requests
//! through the gateway (in process or over HTTP), keeps the topic consumers
//! and the notification worker going, samples cross-service consistency
//! while traffic flows, then quiesces and checks the final state.
//!
//! Virtual-clock runs execute on one logical scheduler ([`sim`]) and are
//! byte-for-byte reproducible. Real-clock runs ([`live`]) use threads and
//! measure wall-clock behaviour.

pub mod consistency;
pub mod live;
pub mod metrics;
pub mod sim;
pub mod spec;
pub mod workload;

use std::sync::Arc;

use thiserror::Error;

use crate::clock::{SharedClock, Timestamp};
use crate::gateway::{Gateway, Request, Response};
use crate::services::consumers::{StepOptions, TopicConsumer};
use crate::services::{Testbed, TestbedConfig, QUEUES};
use consistency::{check_consistency, Phase, Snapshot};
use metrics::{FaultCounts, MetricsReport, ProbeCounts, PropagationRecorder, ResourceSample};
use spec::{ClockMode, WorkloadSpec};
use workload::ClientStats;

pub use consistency::ConsistencyReport;
pub use metrics::{emit_report, verify, ReportFormat, Thresholds, Verdict};
pub use spec::{FaultConfig, LatencyModel, Operation, TransportKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HarnessError {
    #[error("rejected: {0}")]
    Rejected(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("transport error: {0}")]
    Transport(String),
}

/// How requests reach the gateway.
pub trait Transport: Send + Sync {
    fn send(&self, req: &Request) -> Result<Response, String>;
}

impl Transport for Gateway {
    fn send(&self, req: &Request) -> Result<Response, String> {
        Ok(self.dispatch(req))
    }
}

/// Search used by the availability probe.
pub const PROBE_PATH: &str = "/v1/flights?origin=AMS&destination=JFK&date=2026-01-01";
pub const PROBE_SOURCE: &str = "probe";

/// Largest batch a consumer applies per poll.
pub(crate) const CONSUMER_BATCH: usize = 512;

pub(crate) fn secs_to_ns(s: f64) -> u64 {
    (s * 1e9).round() as u64
}

/// Runs a scenario to completion and returns its report.
pub fn run(spec: &WorkloadSpec) -> Result<MetricsReport, HarnessError> {
    spec.validate()?;
    match spec.clock {
        ClockMode::Virtual => sim::run(spec),
        ClockMode::Real => live::run(spec, None),
    }
}

/// The testbed a scenario runs against.
pub fn testbed_for(spec: &WorkloadSpec, clock: SharedClock) -> Arc<Testbed> {
    let config = TestbedConfig {
        seed: spec.seed,
        payment_fail_prob: spec.faults.payment_fail_prob,
        ..TestbedConfig::default()
    };
    Arc::new(Testbed::new(clock, &config))
}

/// Steady window `[ramp, ramp + duration]` in clock nanoseconds.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Window {
    pub start: u64,
    pub end: u64,
}

impl Window {
    pub fn of(spec: &WorkloadSpec) -> Self {
        Window {
            start: secs_to_ns(spec.ramp_up_s),
            end: secs_to_ns(spec.load_secs()),
        }
    }

    pub fn contains(&self, t: Timestamp) -> bool {
        (self.start..=self.end).contains(&t.as_nanos())
    }
}

/// One consumer poll-and-apply, with propagation and throughput bookkeeping.
/// Returns how many records were applied.
pub(crate) fn consume(
    tb: &Testbed,
    consumer: &TopicConsumer,
    opts: &StepOptions<'_>,
    window: Window,
    propagation: &mut PropagationRecorder,
    consumed: &mut u64,
) -> Result<usize, String> {
    let applied = consumer.step(tb, opts).map_err(|e| e.to_string())?;
    let now = tb.clock.now();
    for a in &applied {
        if a.first_time {
            propagation.measure(a.record.publish_ts, now);
            if window.contains(now) {
                *consumed += 1;
            }
        }
    }
    Ok(applied.len())
}

/// Consistency of the live system right now.
pub(crate) fn sample_consistency(tb: &Testbed) -> f64 {
    match Snapshot::capture(tb, Phase::InFlight) {
        Ok(s) => check_consistency(&s, Phase::InFlight).consistency_rate,
        Err(_) => 0.0,
    }
}

/// True when every consumer group is caught up and every queue is empty.
pub(crate) fn is_quiet(tb: &Testbed, consumers: &[TopicConsumer]) -> bool {
    consumers.iter().all(|c| c.lag(tb) == 0) && QUEUES.iter().all(|q| tb.broker.queue_depth(q).is_empty())
}

/// Raw observations from either driver.
#[derive(Debug, Default)]
pub(crate) struct RunData {
    pub clients: ClientStats,
    pub propagation: PropagationRecorder,
    pub consumed_in_window: u64,
    pub inflight_samples: Vec<f64>,
    pub probes: ProbeCounts,
    pub duplicate_deliveries: u64,
    pub consumer_restarts: u64,
    pub quiesced: bool,
    pub resources: Vec<ResourceSample>,
}

fn ratio(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

/// Final consistency check plus everything else, folded into a report.
pub(crate) fn finish(spec: &WorkloadSpec, tb: &Testbed, data: RunData) -> MetricsReport {
    let final_report = match Snapshot::capture(tb, Phase::Final) {
        Ok(s) => check_consistency(&s, Phase::Final),
        Err(e) => ConsistencyReport {
            total_bookings: 0,
            consistent_bookings: 0,
            consistency_rate: 0.0,
            violations: vec![consistency::Violation {
                booking_id: String::new(),
                invariant: "snapshot".into(),
                detail: e.to_string(),
            }],
        },
    };
    let inflight = if data.inflight_samples.is_empty() {
        1.0
    } else {
        data.inflight_samples.iter().sum::<f64>() / data.inflight_samples.len() as f64
    };
    let requests = data.clients.requests;
    MetricsReport {
        scenario: spec.name.clone(),
        seed: spec.seed,
        transport: spec.transport,
        clock: spec.clock,
        duration_s: spec.duration_s,
        throughput_eps: if spec.duration_s > 0.0 {
            data.consumed_in_window as f64 / spec.duration_s
        } else {
            0.0
        },
        consumed_events: data.consumed_in_window,
        response_time_ms: data.clients.response.summary(),
        propagation_latency_ms: data.propagation.histogram.summary(),
        clock_anomalies: data.propagation.clock_anomalies,
        cache: tb.cache.stats(),
        error_rate: ratio(requests.errors, requests.total, 0.0),
        requests,
        consistency_rate_inflight: inflight,
        consistency_samples: data.inflight_samples.len() as u64,
        consistency_rate_final: final_report.consistency_rate,
        final_consistency: final_report,
        availability: ratio(data.probes.succeeded, data.probes.total, 1.0),
        probes: data.probes,
        bookings: tb.bookings.counts(),
        faults: FaultCounts {
            payment_attempts: tb.payments.attempts(),
            injected_payment_failures: tb.payments.injected_failures(),
            duplicate_deliveries: data.duplicate_deliveries,
            consumer_restarts: data.consumer_restarts,
        },
        notifications: tb.notifications.all_records().map(|r| r.len() as u64).unwrap_or(0),
        quiesced: data.quiesced,
        cpu_mem_samples: data.resources,
    }
}
