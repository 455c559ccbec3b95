//! Seeded request generation and the client side of a run.

use std::collections::HashMap;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Zipf};
use serde_json::json;

use super::metrics::{Histogram, RequestCounts};
use super::spec::{LatencyModel, Operation, WorkloadSpec};
use super::{HarnessError, Transport};
use crate::broker::hash64;
use crate::clock::{SharedClock, Timestamp};
use crate::gateway::{Request, Response};
use crate::services::fixtures::{password_for, search_universe, USER_SCOPES};
use crate::services::FixtureSet;

/// Fixed stream ids so adding one random draw never shifts another.
const STREAM_OPS: u64 = 1;
pub(crate) const STREAM_ARRIVALS: u64 = 2;
pub(crate) const STREAM_FAULTS: u64 = 3;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// One request the generator decided to send.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannedOp {
    pub seq: u64,
    pub op: Operation,
    pub user: String,
    /// Network identity, used for rate limiting public calls.
    pub source: String,
    /// Flight id or `origin/destination/date` search key.
    pub target: String,
    pub seats: u32,
    pub correlation_id: String,
}

impl PlannedOp {
    pub fn request(&self, token: Option<&str>) -> Request {
        let req = match self.op {
            Operation::SearchFlights => {
                let mut parts = self.target.splitn(3, '/');
                let (o, d, date) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""), parts.next().unwrap_or(""));
                Request::get(&format!("/v1/flights?origin={o}&destination={d}&date={date}"))
            }
            Operation::FlightDetail => Request::get(&format!("/v1/flights/{}", self.target)),
            Operation::CreateBooking => Request::post(
                "/v1/bookings",
                json!({"flight_id": self.target, "seats": self.seats}),
            ),
            Operation::GetBookings => Request::get("/v1/bookings"),
            Operation::GetTrip => Request::get(&format!("/v1/trips/{}", self.user)),
            Operation::GetProfile => Request::get(&format!("/v1/users/{}", self.user)),
            Operation::UpdateProfile => Request::put(
                &format!("/v1/users/{}", self.user),
                json!({"name": format!("Traveller {} v{}", self.user, self.seq)}),
            ),
        };
        let req = req.from_source(&self.source).correlation(&self.correlation_id);
        match token {
            Some(t) => req.bearer(t),
            None => req,
        }
    }
}

/// Draws operations, users and keys from the scenario's distributions.
#[derive(Debug)]
pub struct OpGenerator {
    rng: ChaCha8Rng,
    cumulative: Vec<(Operation, f64)>,
    flights: Vec<String>,
    flight_zipf: Zipf<f64>,
    searches: Vec<String>,
    search_zipf: Zipf<f64>,
    users: Vec<String>,
    max_seats: u32,
    seq: u64,
}

impl OpGenerator {
    pub fn new(spec: &WorkloadSpec, fixtures: &FixtureSet, days: u32) -> Result<Self, HarnessError> {
        let mut rng = stream(spec.seed, STREAM_OPS);
        let mut flights = fixtures.flight_ids();
        // popularity rank is a seeded permutation of the flight list
        for i in (1..flights.len()).rev() {
            let j = rng.random_range(0..=i);
            flights.swap(i, j);
        }
        let universe = search_universe(spec.seed, days);
        if spec.search_keys > universe.len() {
            return Err(HarnessError::Rejected(format!(
                "search_keys {} exceeds the {} distinct searches the fixtures allow",
                spec.search_keys,
                universe.len()
            )));
        }
        let searches: Vec<String> = universe
            .into_iter()
            .take(spec.search_keys)
            .map(|(o, d, date)| format!("{o}/{d}/{date}"))
            .collect();
        let users = fixtures.user_ids();
        if flights.is_empty() || users.is_empty() {
            return Err(HarnessError::Rejected("fixtures have no flights or no users".into()));
        }
        let zipf = |n: usize| {
            Zipf::new(n as f64, spec.key_skew).map_err(|e| HarnessError::Rejected(format!("key_skew: {e}")))
        };
        let mut acc = 0.0;
        let cumulative = spec
            .mix
            .iter()
            .filter(|(_, f)| **f > 0.0)
            .map(|(op, f)| {
                acc += f;
                (*op, acc)
            })
            .collect();
        Ok(OpGenerator {
            rng,
            cumulative,
            flight_zipf: zipf(flights.len())?,
            flights,
            search_zipf: zipf(searches.len())?,
            searches,
            users,
            max_seats: spec.max_seats,
            seq: 0,
        })
    }

    fn pick_op(&mut self) -> Operation {
        let x: f64 = self.rng.random();
        self.cumulative
            .iter()
            .find(|(_, c)| x < *c)
            .or(self.cumulative.last())
            .map(|(op, _)| *op)
            .expect("mix is not empty")
    }

    fn rank(&mut self, zipf: Zipf<f64>, n: usize) -> usize {
        let k = zipf.sample(&mut self.rng) as usize;
        k.clamp(1, n) - 1
    }

    pub fn next_op(&mut self) -> PlannedOp {
        self.seq += 1;
        let op = self.pick_op();
        let u = self.rng.random_range(0..self.users.len());
        let target = match op {
            Operation::SearchFlights => {
                let i = self.rank(self.search_zipf, self.searches.len());
                self.searches[i].clone()
            }
            Operation::FlightDetail | Operation::CreateBooking => {
                let i = self.rank(self.flight_zipf, self.flights.len());
                self.flights[i].clone()
            }
            _ => String::new(),
        };
        let seats = if op == Operation::CreateBooking {
            self.rng.random_range(1..=self.max_seats)
        } else {
            0
        };
        PlannedOp {
            seq: self.seq,
            op,
            user: self.users[u].clone(),
            source: format!("10.0.{}.{}", u / 256, u % 256),
            target,
            seats,
            correlation_id: format!("c{:08}", self.seq),
        }
    }
}

/// Deterministic per-delivery delay: the same (group, record) always gets
/// the same delay, whatever order deliveries are examined in.
pub fn delivery_delay_ns(model: Option<&LatencyModel>, seed: u64, salt: &str, topic: &str, partition: u32, offset: u64) -> u64 {
    let Some(model) = model else {
        return 0;
    };
    let key = format!("{salt}/{topic}/{partition}/{offset}");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ hash64(key.as_bytes()));
    sample_latency_ns(model, &mut rng)
}

pub fn sample_latency_ns<R: Rng>(model: &LatencyModel, rng: &mut R) -> u64 {
    let ms = match *model {
        LatencyModel::Lognormal { median_ms, sigma } => LogNormal::new(median_ms.ln(), sigma)
            .expect("validated parameters")
            .sample(rng),
        LatencyModel::Constant { ms } => ms,
    };
    (ms * 1e6).round() as u64
}

/// Per-client request accounting, merged at the end of a run.
#[derive(Clone, Debug, Default)]
pub struct ClientStats {
    pub requests: RequestCounts,
    pub response: Histogram,
}

impl ClientStats {
    pub fn record(&mut self, op: &str, result: &Result<Response, String>, ms: f64) {
        let r = &mut self.requests;
        r.total += 1;
        *r.by_operation.entry(op.to_string()).or_insert(0) += 1;
        match result {
            Ok(resp) if resp.status == 429 => r.rate_limited += 1,
            Ok(resp) if resp.is_success() => r.succeeded += 1,
            _ => r.errors += 1,
        }
        self.response.record(ms);
    }

    pub fn merge(&mut self, other: ClientStats) {
        let (a, b) = (&mut self.requests, other.requests);
        a.total += b.total;
        a.succeeded += b.succeeded;
        a.errors += b.errors;
        a.rate_limited += b.rate_limited;
        for (k, v) in b.by_operation {
            *a.by_operation.entry(k).or_insert(0) += v;
        }
        self.response.merge(other.response);
    }
}

/// Access tokens per user, shared by all clients of a run.
#[derive(Debug, Default)]
pub struct TokenCache {
    tokens: Mutex<HashMap<String, (String, u64)>>,
}

/// Tokens this close to expiry are renewed first.
const RENEW_MARGIN_SECS: u64 = 60;

/// Issues a planned operation, logging in first when the user has no
/// usable token. Latencies run from `started`, the scheduled send time.
pub fn perform(
    transport: &dyn Transport,
    tokens: &TokenCache,
    clock: &SharedClock,
    op: &PlannedOp,
    stats: &mut ClientStats,
    started: Timestamp,
) {
    let ms_since = |t: Timestamp| clock.now().saturating_since(t).as_secs_f64() * 1e3;
    let mut token = None;
    if !op.op.is_public() {
        let cached = tokens.tokens.lock().get(&op.user).cloned();
        token = match cached {
            Some((t, exp)) if exp > clock.unix_secs() + RENEW_MARGIN_SECS => Some(t),
            _ => {
                let login_start = clock.now();
                let login = Request::post(
                    "/v1/auth/token",
                    json!({
                        "grant_type": "password",
                        "username": op.user,
                        "password": password_for(&op.user),
                        "scope": USER_SCOPES.join(" "),
                    }),
                )
                .from_source(&op.source)
                .correlation(&format!("{}-login", op.correlation_id));
                let result = transport.send(&login);
                stats.record("login", &result, ms_since(login_start));
                let fresh = result.ok().filter(|r| r.is_success()).and_then(|r| {
                    let t = r.body["access_token"].as_str()?.to_string();
                    let ttl = r.body["expires_in"].as_u64().unwrap_or(0);
                    Some((t, clock.unix_secs() + ttl))
                });
                if let Some((t, exp)) = &fresh {
                    tokens.tokens.lock().insert(op.user.clone(), (t.clone(), *exp));
                }
                fresh.map(|(t, _)| t)
            }
        };
    }
    let result = transport.send(&op.request(token.as_deref()));
    if matches!(&result, Ok(r) if r.status == 401) {
        tokens.tokens.lock().remove(&op.user);
    }
    stats.record(op.op.name(), &result, ms_since(started));
}
