//! Virtual-clock driver: a single-threaded discrete-event scheduler.
//!
//! Every arrival, consumer wake-up, sample, probe and restart is an event
//! on one heap ordered by (time, insertion sequence). The clock jumps from
//! event to event and all randomness comes from seeded streams, so a seed
//! fully determines the report.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use super::metrics::MetricsReport;
use super::spec::WorkloadSpec;
use super::workload::{
    delivery_delay_ns, perform, sample_latency_ns, stream, OpGenerator, TokenCache, STREAM_ARRIVALS, STREAM_FAULTS,
};
use super::{
    consume, finish, is_quiet, sample_consistency, secs_to_ns, testbed_for, HarnessError, RunData, Transport, Window,
    CONSUMER_BATCH, PROBE_PATH, PROBE_SOURCE,
};
use crate::broker::EventRecord;
use crate::clock::{Clock, SharedClock, Timestamp, VirtualClock};
use crate::gateway::{Gateway, Request};
use crate::services::consumers::{Projection, StepOptions, TopicConsumer};
use crate::services::notification::{Finish, Processed};
use crate::services::{Testbed, QUEUES, TOPICS};

/// Longest the scheduler keeps going after the load ends.
pub const QUIESCE_LIMIT: Duration = Duration::from_secs(300);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    Arrival,
    ConsumerWake,
    NotifyWake,
    Sample,
    Probe,
    Restart,
    Recover,
}

struct Sim<'a> {
    spec: &'a WorkloadSpec,
    clock: VirtualClock,
    shared_clock: SharedClock,
    tb: Arc<Testbed>,
    gateway: Gateway,
    generator: OpGenerator,
    tokens: TokenCache,
    arrivals: ChaCha8Rng,
    faults: ChaCha8Rng,
    consumers: Vec<TopicConsumer>,
    heap: BinaryHeap<Reverse<(u64, u64, Event)>>,
    seq: u64,
    wakes: BTreeSet<u64>,
    notify_wake: Option<u64>,
    seen: BTreeMap<(&'static str, u32), u64>,
    down: bool,
    window: Window,
    load_end: u64,
    data: RunData,
}

impl<'a> Sim<'a> {
    fn push(&mut self, at: u64, ev: Event) {
        self.seq += 1;
        self.heap.push(Reverse((at, self.seq, ev)));
    }

    fn wake_consumers(&mut self, at: u64) {
        if self.wakes.insert(at) {
            self.push(at, Event::ConsumerWake);
        }
    }

    fn wake_notifier(&mut self, at: u64) {
        if self.notify_wake.is_none_or(|t| at < t) {
            self.notify_wake = Some(at);
            self.push(at, Event::NotifyWake);
        }
    }

    fn delay(&self, group: &str, r: &EventRecord) -> u64 {
        delivery_delay_ns(
            self.spec.faults.added_latency.as_ref(),
            self.spec.seed,
            group,
            &r.topic,
            r.partition,
            r.offset,
        )
    }

    /// Schedules a consumer wake-up for every record published since the
    /// last look, at the time each group may first see it.
    fn schedule_new_records(&mut self) {
        for topic in TOPICS {
            let parts = self.tb.broker.topic_info(topic).map(|t| t.partitions).unwrap_or(0);
            for p in 0..parts {
                let from = self.seen.get(&(topic, p)).copied().unwrap_or(0);
                let end = self.tb.broker.log_end(topic, p).unwrap_or(0);
                if end <= from {
                    continue;
                }
                let records = self.tb.broker.read_partition(topic, p, from).unwrap_or_default();
                for r in &records {
                    let groups: Vec<&str> = Projection::ALL
                        .iter()
                        .filter(|pr| pr.topic() == topic)
                        .map(|pr| pr.group())
                        .collect();
                    for g in groups {
                        let at = r.publish_ts.as_nanos() + self.delay(g, r);
                        self.wake_consumers(at);
                    }
                }
                self.seen.insert((topic, p), end);
            }
        }
        if QUEUES.iter().any(|q| self.tb.broker.queue_depth(q).ready > 0) {
            let d = match &self.spec.faults.added_latency {
                Some(m) => sample_latency_ns(m, &mut self.faults),
                None => 0,
            };
            let at = self.clock.now().as_nanos() + d;
            self.wake_notifier(at);
        }
    }

    fn duplicate(&mut self) -> bool {
        let p = self.spec.faults.duplicate_delivery_prob;
        p > 0.0 && self.faults.random::<f64>() < p
    }

    fn on_arrival(&mut self) {
        let now = self.clock.now();
        let op = self.generator.next_op();
        let transport: &dyn Transport = &self.gateway;
        perform(transport, &self.tokens, &self.shared_clock, &op, &mut self.data.clients, now);
        self.schedule_new_records();
        self.schedule_arrival(now.as_nanos());
    }

    /// Poisson arrivals at the peak rate, thinned to follow the ramp.
    fn schedule_arrival(&mut self, after: u64) {
        let peak = self.spec.arrival_rate;
        if peak <= 0.0 {
            return;
        }
        let exp = Exp::new(peak).expect("positive rate");
        let mut t = after as f64 / 1e9;
        loop {
            t += exp.sample(&mut self.arrivals);
            let at = secs_to_ns(t);
            if at >= self.load_end {
                return;
            }
            let keep: f64 = self.arrivals.random();
            if keep * peak < self.spec.rate_at(t) {
                self.push(at, Event::Arrival);
                return;
            }
        }
    }

    fn step_consumers(&mut self, skip_all: bool) {
        let now = self.clock.now().as_nanos();
        let mut again = None;
        for i in 0..self.consumers.len() {
            loop {
                let skip_commit = skip_all || self.duplicate();
                let group = self.consumers[i].projection.group();
                let (latency, seed) = (self.spec.faults.added_latency.as_ref(), self.spec.seed);
                let deliverable = |r: &EventRecord| {
                    r.publish_ts.as_nanos() + delivery_delay_ns(latency, seed, group, &r.topic, r.partition, r.offset)
                        <= now
                };
                let opts = StepOptions {
                    max: CONSUMER_BATCH,
                    wait: Duration::ZERO,
                    deliverable: &deliverable,
                    skip_commit,
                };
                let data = &mut self.data;
                let out = consume(
                    &self.tb,
                    &self.consumers[i],
                    &opts,
                    self.window,
                    &mut data.propagation,
                    &mut data.consumed_in_window,
                );
                match out {
                    Ok(n) if skip_commit => {
                        if n > 0 && !skip_all {
                            self.data.duplicate_deliveries += 1;
                            again = Some(now);
                        }
                        break;
                    }
                    Ok(n) if n == CONSUMER_BATCH => continue,
                    Ok(_) => break,
                    Err(_) => {
                        again = Some(now + 10_000_000);
                        break;
                    }
                }
            }
        }
        if let Some(at) = again {
            self.wake_consumers(at);
        }
    }

    fn on_notify(&mut self) {
        self.notify_wake = None;
        if self.down {
            return;
        }
        for q in QUEUES {
            loop {
                let finish = if self.duplicate() { Finish::Redeliver } else { Finish::Ack };
                match self.tb.notifications.process_one(q, finish) {
                    Processed::Idle => break,
                    Processed::Acked { .. } if finish == Finish::Redeliver => self.data.duplicate_deliveries += 1,
                    _ => {}
                }
            }
        }
        if let Some(t) = self.tb.broker.next_redelivery() {
            self.wake_notifier(t.as_nanos());
        }
    }

    fn on_restart(&mut self, now: u64) {
        if let Some(period) = self.spec.faults.consumer_restart_period_s {
            let next = now + secs_to_ns(period);
            if next < self.load_end {
                self.push(next, Event::Restart);
            }
        }
        if self.down {
            return;
        }
        self.data.consumer_restarts += 1;
        // crash after applying a batch but before committing it
        self.step_consumers(true);
        for q in QUEUES {
            self.tb.notifications.process_one(q, Finish::Crash);
        }
        self.down = true;
        let back = now + self.spec.faults.consumer_restart_downtime_ms * 1_000_000;
        self.push(back, Event::Recover);
    }

    fn probe(&mut self) {
        let req = Request::get(PROBE_PATH).from_source(PROBE_SOURCE);
        self.data.probes.total += 1;
        if self.gateway.dispatch(&req).is_success() {
            self.data.probes.succeeded += 1;
        }
    }

    fn run(mut self) -> MetricsReport {
        let period = self.spec.sample_period_ms * 1_000_000;
        self.schedule_arrival(0);
        if period < self.load_end {
            self.push(period, Event::Sample);
        }
        if self.load_end > 0 {
            self.push(0, Event::Probe);
        }
        if let Some(p) = self.spec.faults.consumer_restart_period_s {
            let first = secs_to_ns(p);
            if first < self.load_end {
                self.push(first, Event::Restart);
            }
        }
        let limit = self.load_end + QUIESCE_LIMIT.as_nanos() as u64;
        while let Some(Reverse((at, _, ev))) = self.heap.pop() {
            if at > limit {
                break;
            }
            self.clock.advance_to(Timestamp(at));
            match ev {
                Event::Arrival => self.on_arrival(),
                Event::ConsumerWake => {
                    self.wakes.remove(&at);
                    if !self.down {
                        self.step_consumers(false);
                    }
                }
                Event::NotifyWake => self.on_notify(),
                Event::Sample => {
                    let rate = sample_consistency(&self.tb);
                    self.data.inflight_samples.push(rate);
                    if at + period < self.load_end {
                        self.push(at + period, Event::Sample);
                    }
                }
                Event::Probe => {
                    self.probe();
                    if at + 1_000_000_000 < self.load_end {
                        self.push(at + 1_000_000_000, Event::Probe);
                    }
                }
                Event::Restart => self.on_restart(at),
                Event::Recover => {
                    self.down = false;
                    self.wake_consumers(at);
                    self.wake_notifier(at);
                }
            }
        }
        self.data.quiesced = is_quiet(&self.tb, &self.consumers);
        let data = std::mem::take(&mut self.data);
        finish(self.spec, &self.tb, data)
    }
}

/// Runs a scenario on a virtual clock.
pub fn run(spec: &WorkloadSpec) -> Result<MetricsReport, HarnessError> {
    spec.validate()?;
    let clock = VirtualClock::new();
    let shared_clock = clock.shared();
    let tb = testbed_for(spec, shared_clock.clone());
    let generator = OpGenerator::new(spec, &tb.fixtures, crate::services::FixtureConfig::default().days)?;
    let sim = Sim {
        spec,
        gateway: Gateway::new(tb.clone()),
        tb,
        clock,
        shared_clock,
        generator,
        tokens: TokenCache::default(),
        arrivals: stream(spec.seed, STREAM_ARRIVALS),
        faults: stream(spec.seed, STREAM_FAULTS),
        consumers: Projection::ALL.iter().map(|p| TopicConsumer::new(*p)).collect(),
        heap: BinaryHeap::new(),
        seq: 0,
        wakes: BTreeSet::new(),
        notify_wake: None,
        seen: BTreeMap::new(),
        down: false,
        window: Window::of(spec),
        load_end: secs_to_ns(spec.load_secs()),
        data: RunData::default(),
    };
    Ok(sim.run())
}
