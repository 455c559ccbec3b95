//! Acceptance runner: every headline criterion at its stated tolerance,
//! one PASS/FAIL line each. Exits nonzero if any criterion fails.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use common::props::{
    auth_vectors, bit_flip_successes, concurrent_bookings, saga_fuzz, serial_seats, two_pc_exhaustive,
};
use common::{bucket_oracle, rate_limit_experiment, uniform_arrivals};
use skyway::harness::metrics::MetricsReport;
use skyway::harness::spec::WorkloadSpec;
use skyway::harness::{self, HarnessError};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn scenario(name: &str) -> Result<MetricsReport, HarnessError> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("../../scenarios/{name}.json"));
    harness::run(&WorkloadSpec::from_file(&path)?)
}

fn failed_run(name: &str, e: &HarnessError) -> Outcome {
    outcome(false, format!("{name} run failed: {e}"))
}

fn main() -> ExitCode {
    let started = Instant::now();
    let mut results: Vec<(u32, Outcome)> = Vec::new();
    let mut record = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let o = f();
        println!("{} {n:>2} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };

    record(7, "2pc atomicity", &mut || {
        let (passed, failures) = two_pc_exhaustive();
        outcome(failures.is_empty() && passed == 27, format!("{passed}/27 vote vectors, failures {failures:?}"))
    });

    record(8, "saga correctness", &mut || {
        let (passed, failures) = saga_fuzz(1000);
        outcome(
            passed == 1000,
            format!("{passed}/1000 seeded executions with every crash-resume prefix, failures {failures:?}"),
        )
    });

    record(9, "seat conservation", &mut || {
        let s = concurrent_bookings(60, 50, 2);
        let (oracle_confirmed, oracle_seats) = serial_seats(60, &[2; 50]);
        let conserved = s.capacity == s.seats_available + s.seats_held;
        outcome(
            s.confirmed == 30
                && s.confirmed == oracle_confirmed
                && s.seats_held == oracle_seats
                && s.rejected == 20
                && conserved
                && s.invariant_violations == 0,
            format!(
                "{} confirmed, {} rejected, {} held + {} free of {}, {} invariant violations",
                s.confirmed, s.rejected, s.seats_held, s.seats_available, s.capacity, s.invariant_violations
            ),
        )
    });

    record(10, "auth hardness", &mut || {
        let vectors = auth_vectors();
        let flips = bit_flip_successes(10_000, 20_240_101);
        outcome(
            vectors.is_ok() && flips == 0,
            format!("fixed vectors {vectors:?}, {flips} of 10000 single-bit corruptions verified"),
        )
    });

    record(12, "rate limiting", &mut || {
        let exp = rate_limit_experiment(150, 3, 10);
        let all = uniform_arrivals(exp.arrivals_ns[0] - 3_000_000_000, 150, 13);
        let oracle = bucket_oracle(&all, 100, 100);
        let matches = exp.decisions == oracle[oracle.len() - exp.decisions.len()..];
        outcome(
            (exp.accepted as i64 - 1000).abs() <= 2 && exp.rejected_with_effect == 0 && matches,
            format!(
                "{} accepted of 1500 (want 1000 +/- 2), {} rejected with side effects, bucket oracle agrees: {matches}",
                exp.accepted, exp.rejected_with_effect
            ),
        )
    });

    let cache = scenario("cache");
    record(3, "cache hit ratio", &mut || match &cache {
        Ok(r) => {
            let ratio = r.cache.hit_ratio.unwrap_or(0.0);
            outcome(
                ratio >= 0.90,
                format!(
                    "hit ratio {ratio:.4} ({} hits, {} misses), gate 0.90, reference value 0.92",
                    r.cache.hits, r.cache.misses
                ),
            )
        }
        Err(e) => failed_run("cache", e),
    });

    let faulted = scenario("faulted");
    let faulted_again = scenario("faulted");
    let baseline = scenario("baseline");

    record(4, "consistency", &mut || match (&faulted, &baseline) {
        (Ok(f), Ok(b)) => outcome(
            f.consistency_rate_inflight >= 0.995 && f.consistency_rate_final == 1.0 && b.consistency_rate_final == 1.0,
            format!(
                "faulted in-flight {:.5} over {} samples, final {} ({} violations); baseline final {}",
                f.consistency_rate_inflight,
                f.consistency_samples,
                f.consistency_rate_final,
                f.final_consistency.violations.len(),
                b.consistency_rate_final
            ),
        ),
        (Err(e), _) => failed_run("faulted", e),
        (_, Err(e)) => failed_run("baseline", e),
    });

    record(5, "error rate", &mut || match &faulted {
        Ok(f) => outcome(
            f.error_rate <= 0.002,
            format!(
                "{:.5} ({} errors of {} requests; {} bookings compensated)",
                f.error_rate, f.requests.errors, f.requests.total, f.bookings.compensated
            ),
        ),
        Err(e) => failed_run("faulted", e),
    });

    record(6, "availability", &mut || match &faulted {
        Ok(f) => outcome(
            f.availability >= 0.999,
            format!(
                "{:.5} ({} of {} probes, {} consumer restarts)",
                f.availability, f.probes.succeeded, f.probes.total, f.faults.consumer_restarts
            ),
        ),
        Err(e) => failed_run("faulted", e),
    });

    record(11, "determinism", &mut || match (&faulted, &faulted_again) {
        (Ok(a), Ok(b)) => {
            let (a, b) = (a.to_json(), b.to_json());
            outcome(a == b, format!("two seeded faulted runs, {} and {} bytes, identical: {}", a.len(), b.len(), a == b))
        }
        (Err(e), _) | (_, Err(e)) => failed_run("faulted", e),
    });

    record(2, "propagation latency", &mut || match &baseline {
        Ok(b) => {
            let p = &b.propagation_latency_ms;
            outcome(
                p.p99_ms < 75.0 && p.count > 0,
                format!(
                    "p99 {:.3} ms over {} events (p50 {:.3}, max {:.3}); response p95 {:.3} ms",
                    p.p99_ms, p.count, p.p50_ms, p.max_ms, b.response_time_ms.p95_ms
                ),
            )
        }
        Err(e) => failed_run("baseline", e),
    });

    record(1, "throughput", &mut || match scenario("peak") {
        Ok(r) => outcome(
            r.throughput_eps >= 1050.0,
            format!(
                "{:.1} events/s over {} s ({} events), error rate {:.5}",
                r.throughput_eps, r.duration_s, r.consumed_events, r.error_rate
            ),
        ),
        Err(e) => failed_run("peak", &e),
    });

    results.sort_by_key(|r| r.0);
    let failed: Vec<u32> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed in {:.0} s",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {failed:?}");
        ExitCode::FAILURE
    }
}
