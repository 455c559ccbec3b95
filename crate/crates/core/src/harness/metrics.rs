//! Metric accumulators, the run report and its file formats.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::consistency::ConsistencyReport;
use super::spec::{ClockMode, TransportKind};
use super::HarnessError;
use crate::cache::CacheStats;
use crate::clock::Timestamp;
use crate::services::BookingCounts;

/// Exact sample store with nearest-rank percentiles.
#[derive(Clone, Debug, Default)]
pub struct Histogram {
    samples: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HistogramSummary {
    pub count: u64,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

impl Histogram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, ms: f64) {
        self.samples.push(ms);
    }

    pub fn merge(&mut self, other: Histogram) {
        self.samples.extend(other.samples);
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Summary statistics. Samples are sorted first, so the result does
    /// not depend on the order they were recorded in.
    pub fn summary(&self) -> HistogramSummary {
        let mut s = self.samples.clone();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        if n == 0 {
            return HistogramSummary::default();
        }
        let rank = |p: f64| {
            let k = ((p / 100.0) * n as f64).ceil() as usize;
            s[k.clamp(1, n) - 1]
        };
        HistogramSummary {
            count: n as u64,
            mean_ms: s.iter().sum::<f64>() / n as f64,
            p50_ms: rank(50.0),
            p95_ms: rank(95.0),
            p99_ms: rank(99.0),
            max_ms: s[n - 1],
        }
    }
}

/// Publish-to-apply latency samples on one clock.
#[derive(Clone, Debug, Default)]
pub struct PropagationRecorder {
    pub histogram: Histogram,
    pub clock_anomalies: u64,
}

impl PropagationRecorder {
    /// Records `apply - publish`. A negative gap means the two stamps came
    /// from different clocks; it is counted, not recorded.
    pub fn measure(&mut self, publish: Timestamp, apply: Timestamp) {
        if apply < publish {
            self.clock_anomalies += 1;
        } else {
            self.histogram.record((apply.as_nanos() - publish.as_nanos()) as f64 / 1e6);
        }
    }

    pub fn merge(&mut self, other: PropagationRecorder) {
        self.histogram.merge(other.histogram);
        self.clock_anomalies += other.clock_anomalies;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RequestCounts {
    pub total: u64,
    pub succeeded: u64,
    pub errors: u64,
    pub rate_limited: u64,
    pub by_operation: BTreeMap<String, u64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProbeCounts {
    pub total: u64,
    pub succeeded: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultCounts {
    pub payment_attempts: u64,
    pub injected_payment_failures: u64,
    pub duplicate_deliveries: u64,
    pub consumer_restarts: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceSample {
    pub t_s: f64,
    pub cpu_pct: f64,
    pub rss_kb: u64,
}

/// Everything a run measured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: String,
    pub seed: u64,
    pub transport: TransportKind,
    pub clock: ClockMode,
    /// Length of the steady window that throughput is measured over.
    pub duration_s: f64,
    pub throughput_eps: f64,
    /// Events applied for the first time by a consumer inside the window.
    pub consumed_events: u64,
    pub response_time_ms: HistogramSummary,
    pub propagation_latency_ms: HistogramSummary,
    pub clock_anomalies: u64,
    pub cache: CacheStats,
    pub requests: RequestCounts,
    pub error_rate: f64,
    pub consistency_rate_inflight: f64,
    pub consistency_samples: u64,
    pub consistency_rate_final: f64,
    pub final_consistency: ConsistencyReport,
    pub availability: f64,
    pub probes: ProbeCounts,
    pub bookings: BookingCounts,
    pub faults: FaultCounts,
    pub notifications: u64,
    pub quiesced: bool,
    pub cpu_mem_samples: Vec<ResourceSample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Text,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "json" => Some(ReportFormat::Json),
            "csv" => Some(ReportFormat::Csv),
            "text" | "txt" => Some(ReportFormat::Text),
            _ => None,
        }
    }
}

fn flatten_into(prefix: &str, v: &Value, out: &mut BTreeMap<String, f64>) {
    match v {
        Value::Number(n) => {
            if let Some(x) = n.as_f64() {
                out.insert(prefix.to_string(), x);
            }
        }
        Value::Bool(b) => {
            out.insert(prefix.to_string(), if *b { 1.0 } else { 0.0 });
        }
        Value::Object(map) => {
            for (k, v) in map {
                let name = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_into(&name, v, out);
            }
        }
        // lists (violations, resource samples) and labels are not metrics
        _ => {}
    }
}

/// Numeric leaves of a report document, keyed by dotted path.
pub fn flatten_metrics(doc: &Value) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    flatten_into("", doc, &mut out);
    out
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Rejected(format!("report does not parse: {e}")))
    }

    pub fn metrics(&self) -> BTreeMap<String, f64> {
        flatten_metrics(&serde_json::to_value(self).expect("report serializes"))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in self.metrics() {
            let _ = writeln!(out, "{k},{v}");
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let h = |name: &str, s: &HistogramSummary| {
            format!(
                "{name:<22} n={} mean={:.3} p50={:.3} p95={:.3} p99={:.3} max={:.3} ms\n",
                s.count, s.mean_ms, s.p50_ms, s.p95_ms, s.p99_ms, s.max_ms
            )
        };
        let _ = writeln!(
            o,
            "scenario {} (seed {}, {:?} transport, {:?} clock)",
            self.scenario, self.seed, self.transport, self.clock
        );
        let _ = writeln!(
            o,
            "{:<22} {:.1} events/s ({} events over {} s)",
            "throughput", self.throughput_eps, self.consumed_events, self.duration_s
        );
        o.push_str(&h("response time", &self.response_time_ms));
        o.push_str(&h("propagation latency", &self.propagation_latency_ms));
        let ratio = self.cache.hit_ratio.map_or("n/a".to_string(), |r| format!("{r:.4}"));
        let _ = writeln!(o, "{:<22} {ratio} ({} hits, {} misses)", "cache hit ratio", self.cache.hits, self.cache.misses);
        let _ = writeln!(
            o,
            "{:<22} {:.5} ({} of {} requests, {} rate limited)",
            "error rate", self.error_rate, self.requests.errors, self.requests.total, self.requests.rate_limited
        );
        let _ = writeln!(
            o,
            "{:<22} in-flight {:.5} over {} samples, final {:.5} ({} violations)",
            "consistency",
            self.consistency_rate_inflight,
            self.consistency_samples,
            self.consistency_rate_final,
            self.final_consistency.violations.len()
        );
        let _ = writeln!(
            o,
            "{:<22} {:.5} ({} of {} probes)",
            "availability", self.availability, self.probes.succeeded, self.probes.total
        );
        let b = &self.bookings;
        let _ = writeln!(
            o,
            "{:<22} {} confirmed, {} rejected, {} compensated, {} stuck",
            "bookings", b.confirmed, b.rejected, b.compensated, b.stuck
        );
        o
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Json => self.to_json(),
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Text => self.to_text(),
        }
    }
}

/// Writes the report in the given format.
pub fn emit_report(report: &MetricsReport, format: ReportFormat, path: &Path) -> Result<(), HarnessError> {
    std::fs::write(path, report.render(format)).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

/// Bounds for one metric. All given bounds must hold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bound {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    /// Strictly greater than.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<f64>,
    /// Strictly less than.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lt: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub metrics: BTreeMap<String, Bound>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub metric: String,
    pub value: Option<f64>,
    pub pass: bool,
    pub explanation: String,
}

impl Thresholds {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Rejected(format!("thresholds do not parse: {e}")))
    }

    /// One verdict per bounded metric, in name order.
    pub fn check(&self, metrics: &BTreeMap<String, f64>) -> Vec<Verdict> {
        self.metrics
            .iter()
            .map(|(name, bound)| {
                let Some(&v) = metrics.get(name) else {
                    return Verdict {
                        metric: name.clone(),
                        value: None,
                        pass: false,
                        explanation: "metric missing from report".into(),
                    };
                };
                let mut failed = Vec::new();
                if let Some(m) = bound.min.filter(|m| v < *m) {
                    failed.push(format!("below min {m}"));
                }
                if let Some(m) = bound.max.filter(|m| v > *m) {
                    failed.push(format!("above max {m}"));
                }
                if let Some(m) = bound.gt.filter(|m| v <= *m) {
                    failed.push(format!("not above {m}"));
                }
                if let Some(m) = bound.lt.filter(|m| v >= *m) {
                    failed.push(format!("not below {m}"));
                }
                Verdict {
                    metric: name.clone(),
                    value: Some(v),
                    pass: failed.is_empty(),
                    explanation: if failed.is_empty() { "ok".into() } else { failed.join(", ") },
                }
            })
            .collect()
    }
}

/// Reads a report and a thresholds file and checks one against the other.
pub fn verify(report_path: &Path, thresholds_path: &Path) -> Result<Vec<Verdict>, HarnessError> {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| HarnessError::Io(format!("{}: {e}", p.display())));
    let report: Value = serde_json::from_str(&read(report_path)?)
        .map_err(|e| HarnessError::Rejected(format!("report does not parse: {e}")))?;
    let thresholds = Thresholds::from_json(&read(thresholds_path)?)?;
    Ok(thresholds.check(&flatten_metrics(&report)))
}
