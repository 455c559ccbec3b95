//! Real-clock driver: concurrent clients, consumer threads and samplers.
//!
//! An open-loop dispatcher releases requests at their scheduled Poisson
//! times and a pool of workers sends them, so a slow system shows up as
//! queueing delay in response times rather than as a lower offered rate.
//! Every thread keeps its own accumulators; they are merged after join.

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::Mutex;
use rand::Rng;
use rand_distr::{Distribution, Exp};

use super::metrics::{MetricsReport, PropagationRecorder, ResourceSample};
use super::spec::{TransportKind, WorkloadSpec};
use super::workload::{
    delivery_delay_ns, perform, stream, ClientStats, OpGenerator, PlannedOp, TokenCache, STREAM_ARRIVALS,
    STREAM_FAULTS,
};
use super::{
    consume, finish, is_quiet, sample_consistency, secs_to_ns, testbed_for, HarnessError, RunData, Transport, Window,
    CONSUMER_BATCH, PROBE_PATH, PROBE_SOURCE,
};
use crate::broker::EventRecord;
use crate::clock::{SharedClock, SystemClock, Timestamp};
use crate::gateway::{Gateway, Request};
use crate::http::{HttpClient, HttpServer};
use crate::services::consumers::{Projection, StepOptions, TopicConsumer};
use crate::services::notification::{Finish, Processed};
use crate::services::{FixtureConfig, Testbed, QUEUES};

/// Longest a run waits for consumers and queues to drain after the load.
pub const QUIESCE_TIMEOUT: Duration = Duration::from_secs(60);

const IDLE: Duration = Duration::from_millis(1);

/// Sleeps until the clock reads `t` or `stop` is raised.
fn sleep_until(clock: &SharedClock, t: u64, stop: &AtomicBool) {
    loop {
        let now = clock.now().as_nanos();
        if now >= t || stop.load(Ordering::Relaxed) {
            return;
        }
        thread::sleep(Duration::from_nanos(t - now).min(Duration::from_millis(50)));
    }
}

struct ConsumerOutput {
    propagation: PropagationRecorder,
    consumed: u64,
    duplicates: u64,
}

#[derive(Default)]
struct Flags {
    load_done: AtomicBool,
    shutdown: AtomicBool,
    down: AtomicBool,
    crash_epoch: AtomicU64,
}

/// Reads CPU ticks (user + system) and resident set size of this process.
fn self_usage() -> Option<(u64, u64)> {
    let stat = std::fs::read_to_string("/proc/self/stat").ok()?;
    // fields after the parenthesised command name; utime and stime are 14 and 15
    let rest = stat.rsplit_once(')')?.1;
    let fields: Vec<&str> = rest.split_whitespace().collect();
    let ticks = fields.get(11)?.parse::<u64>().ok()? + fields.get(12)?.parse::<u64>().ok()?;
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let rss = status
        .lines()
        .find_map(|l| l.strip_prefix("VmRSS:"))
        .and_then(|v| v.split_whitespace().next()?.parse().ok())?;
    Some((ticks, rss))
}

/// Clock ticks per second as reported by the kernel for most Linux builds.
const TICKS_PER_SEC: f64 = 100.0;

/// Runs a scenario against the wall clock.
pub fn run(spec: &WorkloadSpec, listen: Option<&str>) -> Result<MetricsReport, HarnessError> {
    spec.validate()?;
    let clock = SystemClock::shared();
    let tb = testbed_for(spec, clock.clone());
    let gateway = Arc::new(Gateway::new(tb.clone()));
    let mut generator = OpGenerator::new(spec, &tb.fixtures, FixtureConfig::default().days)?;

    let mut server = None;
    let transport: Arc<dyn Transport> = match spec.transport {
        TransportKind::Inproc => gateway.clone(),
        TransportKind::Http => {
            let s = HttpServer::start(gateway.clone(), listen.unwrap_or("127.0.0.1:0"), spec.workers.max(2))
                .map_err(|e| HarnessError::Transport(e.to_string()))?;
            let client = HttpClient::new(&format!("http://{}", s.addr()));
            server = Some(s);
            Arc::new(client)
        }
    };

    let window = Window::of(spec);
    let load_end = secs_to_ns(spec.load_secs());
    let flags = Arc::new(Flags::default());
    let consumers: Arc<Vec<TopicConsumer>> = Arc::new(Projection::ALL.iter().map(|p| TopicConsumer::new(*p)).collect());
    let tokens = Arc::new(TokenCache::default());
    // reset the origin so time zero is the first scheduled request
    let origin = clock.now().as_nanos();
    let at = move |rel: u64| origin + rel;
    let window = Window {
        start: at(window.start),
        end: at(window.end),
    };

    // consumer threads
    let mut consumer_threads = Vec::new();
    for i in 0..consumers.len() {
        let (tb, consumers, flags, clock) = (tb.clone(), consumers.clone(), flags.clone(), clock.clone());
        let latency = spec.faults.added_latency;
        let (seed, dup) = (spec.seed, spec.faults.duplicate_delivery_prob);
        consumer_threads.push(thread::spawn(move || {
            let consumer = &consumers[i];
            let group = consumer.projection.group();
            let mut rng = stream(seed, STREAM_FAULTS + 16 + i as u64);
            let mut out = ConsumerOutput {
                propagation: PropagationRecorder::default(),
                consumed: 0,
                duplicates: 0,
            };
            let mut epoch = 0;
            while !flags.shutdown.load(Ordering::Relaxed) {
                let crash = flags.crash_epoch.load(Ordering::Relaxed);
                if flags.down.load(Ordering::Relaxed) && crash == epoch {
                    thread::sleep(IDLE);
                    continue;
                }
                let crashing = crash != epoch;
                epoch = crash;
                let skip_commit = crashing || (dup > 0.0 && rng.random::<f64>() < dup);
                let now = clock.now().as_nanos();
                let deliverable = |r: &EventRecord| {
                    r.publish_ts.as_nanos() + delivery_delay_ns(latency.as_ref(), seed, group, &r.topic, r.partition, r.offset)
                        <= now
                };
                let opts = StepOptions {
                    max: CONSUMER_BATCH,
                    wait: Duration::from_millis(5),
                    deliverable: &deliverable,
                    skip_commit,
                };
                match consume(&tb, consumer, &opts, window, &mut out.propagation, &mut out.consumed) {
                    Ok(n) if n > 0 => {
                        if skip_commit && !crashing {
                            out.duplicates += 1;
                        }
                    }
                    _ => thread::sleep(IDLE),
                }
            }
            out
        }));
    }

    // notification worker
    let notifier = {
        let (tb, flags) = (tb.clone(), flags.clone());
        let (seed, dup) = (spec.seed, spec.faults.duplicate_delivery_prob);
        thread::spawn(move || {
            let mut rng = stream(seed, STREAM_FAULTS + 8);
            let mut duplicates = 0u64;
            let mut epoch = 0;
            while !flags.shutdown.load(Ordering::Relaxed) {
                let crash = flags.crash_epoch.load(Ordering::Relaxed);
                if crash != epoch {
                    epoch = crash;
                    for q in QUEUES {
                        tb.notifications.process_one(q, Finish::Crash);
                    }
                }
                if flags.down.load(Ordering::Relaxed) {
                    thread::sleep(IDLE);
                    continue;
                }
                let mut busy = false;
                for q in QUEUES {
                    let finish = if dup > 0.0 && rng.random::<f64>() < dup { Finish::Redeliver } else { Finish::Ack };
                    match tb.notifications.process_one(q, finish) {
                        Processed::Idle => {}
                        Processed::Acked { .. } if finish == Finish::Redeliver => {
                            duplicates += 1;
                            busy = true;
                        }
                        _ => busy = true,
                    }
                }
                if !busy {
                    thread::sleep(IDLE);
                }
            }
            duplicates
        })
    };

    // in-flight consistency sampler
    let sampler = {
        let (tb, flags, clock) = (tb.clone(), flags.clone(), clock.clone());
        let period = spec.sample_period_ms * 1_000_000;
        thread::spawn(move || {
            let mut samples = Vec::new();
            let mut next = at(period);
            while next < at(load_end) {
                sleep_until(&clock, next, &flags.load_done);
                if flags.load_done.load(Ordering::Relaxed) {
                    break;
                }
                samples.push(sample_consistency(&tb));
                next += period;
            }
            samples
        })
    };

    // availability probe, once a second
    let prober = {
        let (transport, flags, clock) = (transport.clone(), flags.clone(), clock.clone());
        thread::spawn(move || {
            let mut probes = super::metrics::ProbeCounts::default();
            let mut next = at(0);
            while next < at(load_end) {
                sleep_until(&clock, next, &flags.load_done);
                if flags.load_done.load(Ordering::Relaxed) {
                    break;
                }
                probes.total += 1;
                let req = Request::get(PROBE_PATH).from_source(PROBE_SOURCE);
                if transport.send(&req).is_ok_and(|r| r.is_success()) {
                    probes.succeeded += 1;
                }
                next += 1_000_000_000;
            }
            probes
        })
    };

    // consumer restarts
    let restarter = spec.faults.consumer_restart_period_s.map(|p| {
        let (flags, clock) = (flags.clone(), clock.clone());
        let period = secs_to_ns(p);
        let downtime = Duration::from_millis(spec.faults.consumer_restart_downtime_ms);
        thread::spawn(move || {
            let mut restarts = 0u64;
            let mut next = at(period);
            while next < at(load_end) {
                sleep_until(&clock, next, &flags.load_done);
                if flags.load_done.load(Ordering::Relaxed) {
                    break;
                }
                restarts += 1;
                flags.down.store(true, Ordering::Relaxed);
                flags.crash_epoch.fetch_add(1, Ordering::Relaxed);
                thread::sleep(downtime);
                flags.down.store(false, Ordering::Relaxed);
                next += period;
            }
            restarts
        })
    });

    // coarse resource sampling
    let resources = {
        let flags = flags.clone();
        thread::spawn(move || {
            let start = Instant::now();
            let mut samples = Vec::new();
            let mut last = self_usage();
            let mut last_t = 0.0;
            while !flags.shutdown.load(Ordering::Relaxed) {
                for _ in 0..20 {
                    if flags.shutdown.load(Ordering::Relaxed) {
                        break;
                    }
                    thread::sleep(Duration::from_millis(50));
                }
                let t = start.elapsed().as_secs_f64();
                let now = self_usage();
                if let (Some((t0, _)), Some((t1, rss))) = (last, now) {
                    let cpu = (t1.saturating_sub(t0)) as f64 / TICKS_PER_SEC / (t - last_t).max(1e-9) * 100.0;
                    samples.push(ResourceSample {
                        t_s: (t * 1000.0).round() / 1000.0,
                        cpu_pct: (cpu * 10.0).round() / 10.0,
                        rss_kb: rss,
                    });
                }
                last = now;
                last_t = t;
            }
            samples
        })
    };

    // clients
    let (tx, rx) = mpsc::sync_channel::<(u64, PlannedOp)>(4096);
    let rx = Arc::new(Mutex::new(rx));
    let mut workers = Vec::new();
    for _ in 0..spec.workers {
        let (rx, transport, tokens, clock) = (rx.clone(), transport.clone(), tokens.clone(), clock.clone());
        workers.push(thread::spawn(move || {
            let mut stats = ClientStats::default();
            loop {
                let job = rx.lock().recv();
                let Ok((scheduled, op)) = job else {
                    break;
                };
                perform(transport.as_ref(), &tokens, &clock, &op, &mut stats, Timestamp(scheduled));
            }
            stats
        }));
    }

    // open-loop dispatcher on this thread
    if spec.arrival_rate > 0.0 {
        let mut arrivals = stream(spec.seed, STREAM_ARRIVALS);
        let exp = Exp::new(spec.arrival_rate).expect("positive rate");
        let mut t = 0.0f64;
        loop {
            t += exp.sample(&mut arrivals);
            let rel = secs_to_ns(t);
            if rel >= load_end {
                break;
            }
            let keep: f64 = arrivals.random();
            if keep * spec.arrival_rate >= spec.rate_at(t) {
                continue;
            }
            let op = generator.next_op();
            sleep_until(&clock, at(rel), &flags.shutdown);
            if tx.send((at(rel), op)).is_err() {
                break;
            }
        }
    }
    sleep_until(&clock, at(load_end), &flags.shutdown);
    drop(tx);
    let mut data = RunData::default();
    for w in workers {
        data.clients.merge(w.join().expect("worker thread"));
    }
    flags.load_done.store(true, Ordering::Relaxed);
    if let Some(r) = restarter {
        data.consumer_restarts = r.join().expect("restart thread");
    }

    // quiesce
    let deadline = Instant::now() + QUIESCE_TIMEOUT;
    loop {
        if is_quiet(&tb, &consumers) {
            data.quiesced = true;
            break;
        }
        if Instant::now() >= deadline {
            break;
        }
        thread::sleep(Duration::from_millis(5));
    }
    flags.shutdown.store(true, Ordering::Relaxed);
    for c in consumer_threads {
        let out = c.join().expect("consumer thread");
        data.propagation.merge(out.propagation);
        data.consumed_in_window += out.consumed;
        data.duplicate_deliveries += out.duplicates;
    }
    data.duplicate_deliveries += notifier.join().expect("notification thread");
    data.inflight_samples = sampler.join().expect("sampler thread");
    data.probes = prober.join().expect("probe thread");
    data.resources = resources.join().expect("resource thread");
    if let Some(s) = server {
        s.shutdown();
    }
    Ok(finish(spec, &tb, data))
}

/// Keeps every topic consumer and the notification worker running for as
/// long as the process lives. Used when serving the gateway on its own.
pub fn spawn_background(tb: Arc<Testbed>) -> Vec<thread::JoinHandle<()>> {
    let mut handles: Vec<thread::JoinHandle<()>> = Projection::ALL
        .iter()
        .map(|p| {
            let (tb, consumer) = (tb.clone(), TopicConsumer::new(*p));
            thread::spawn(move || {
                let all = |_: &EventRecord| true;
                let opts = StepOptions {
                    max: CONSUMER_BATCH,
                    wait: Duration::from_millis(50),
                    deliverable: &all,
                    skip_commit: false,
                };
                loop {
                    if !matches!(consumer.step(&tb, &opts), Ok(a) if !a.is_empty()) {
                        thread::sleep(IDLE);
                    }
                }
            })
        })
        .collect();
    handles.push(thread::spawn(move || loop {
        let busy = QUEUES
            .iter()
            .filter(|q| tb.notifications.process_one(q, Finish::Ack) != Processed::Idle)
            .count();
        if busy == 0 {
            thread::sleep(IDLE);
        }
    }));
    handles
}
