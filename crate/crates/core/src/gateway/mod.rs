//! Single entry point in front of the services.
//!
//! Every request passes the same checks in a fixed order: rate limit, token
//! verification, scope, route, and only then reaches a service. A request
//! turned away at any check leaves no trace in any service.

pub mod aggregate;
pub mod rate_limit;
pub mod router;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::auth::{AuthError, Claims};
use crate::services::{ServiceError, Testbed};
use aggregate::{project, section_error, Selection, SelectionError};
use rate_limit::{BucketConfig, Decision, RateLimiter};
use router::{Access, Handler, Matched, Router, Target};

pub use router::Method;

pub const CORRELATION_HEADER: &str = "x-correlation-id";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub method: Method,
    /// Path with optional query string.
    pub path: String,
    /// Header names are lower case.
    pub headers: BTreeMap<String, String>,
    pub body: Option<Value>,
    /// Network origin, used as the rate-limit identity when unauthenticated.
    pub source: String,
}

impl Request {
    pub fn new(method: Method, path: &str) -> Self {
        Request {
            method,
            path: path.to_string(),
            headers: BTreeMap::new(),
            body: None,
            source: "anonymous".into(),
        }
    }

    pub fn get(path: &str) -> Self {
        Self::new(Method::Get, path)
    }

    pub fn post(path: &str, body: Value) -> Self {
        Self::new(Method::Post, path).json(body)
    }

    pub fn put(path: &str, body: Value) -> Self {
        Self::new(Method::Put, path).json(body)
    }

    pub fn header(mut self, name: &str, value: &str) -> Self {
        self.headers.insert(name.to_ascii_lowercase(), value.to_string());
        self
    }

    pub fn bearer(self, token: &str) -> Self {
        self.header("authorization", &format!("Bearer {token}"))
    }

    pub fn json(mut self, body: Value) -> Self {
        self.body = Some(body);
        self
    }

    pub fn from_source(mut self, source: &str) -> Self {
        self.source = source.to_string();
        self
    }

    pub fn correlation(self, id: &str) -> Self {
        self.header(CORRELATION_HEADER, id)
    }

    fn path_and_query(&self) -> (&str, BTreeMap<String, String>) {
        match self.path.split_once('?') {
            Some((p, q)) => (p, form_urlencoded::parse(q.as_bytes()).into_owned().collect()),
            None => (self.path.as_str(), BTreeMap::new()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub status: u16,
    pub body: Value,
    pub correlation_id: String,
}

impl Response {
    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    #[error("rate limit exceeded")]
    RateLimited,
    #[error("unauthenticated: {0}")]
    Unauthenticated(String),
    #[error("forbidden: {0}")]
    Forbidden(String),
    #[error("no route for {0}")]
    NoRoute(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("bad request: {0}")]
    BadRequest(String),
    #[error("bad selection: {0}")]
    BadSelection(#[from] SelectionError),
    #[error("service failure: {0}")]
    ServiceFailure(String),
}

impl GatewayError {
    pub fn status(&self) -> u16 {
        match self {
            GatewayError::RateLimited => 429,
            GatewayError::Unauthenticated(_) => 401,
            GatewayError::Forbidden(_) => 403,
            GatewayError::NoRoute(_) | GatewayError::NotFound(_) => 404,
            GatewayError::BadRequest(_) | GatewayError::BadSelection(_) => 400,
            GatewayError::ServiceFailure(_) => 502,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::RateLimited => "rate_limited",
            GatewayError::Unauthenticated(_) => "unauthenticated",
            GatewayError::Forbidden(_) => "forbidden",
            GatewayError::NoRoute(_) => "no_route",
            GatewayError::NotFound(_) => "not_found",
            GatewayError::BadRequest(_) => "bad_request",
            GatewayError::BadSelection(_) => "bad_selection",
            GatewayError::ServiceFailure(_) => "service_failure",
        }
    }
}

impl From<ServiceError> for GatewayError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::NotFound(m) => GatewayError::NotFound(m),
            ServiceError::BadRequest(_) | ServiceError::InvalidState(_) | ServiceError::InsufficientSeats { .. } => {
                GatewayError::BadRequest(e.to_string())
            }
            ServiceError::Forbidden(m) => GatewayError::Forbidden(m),
            other => GatewayError::ServiceFailure(other.to_string()),
        }
    }
}

impl From<AuthError> for GatewayError {
    fn from(e: AuthError) -> Self {
        match e {
            AuthError::ForbiddenScope(_) | AuthError::InsufficientScope(_) => GatewayError::Forbidden(e.to_string()),
            other => GatewayError::Unauthenticated(other.to_string()),
        }
    }
}

type Outcome = Result<(u16, Value), GatewayError>;

const TARGETS: [Target; 6] = [
    Target::Auth,
    Target::Flight,
    Target::Booking,
    Target::Payment,
    Target::Profile,
    Target::Aggregator,
];

#[derive(Debug)]
pub struct Gateway {
    tb: Arc<Testbed>,
    router: Router,
    limiter: RateLimiter,
    forwarded: [AtomicU64; 6],
    rejected: AtomicU64,
}

fn target_index(t: Target) -> usize {
    TARGETS.iter().position(|x| *x == t).expect("listed")
}

fn scopes_from(body: &Value) -> Vec<String> {
    match &body["scope"] {
        Value::String(s) => s.split_whitespace().map(str::to_string).collect(),
        Value::Array(a) => a.iter().filter_map(|v| v.as_str().map(str::to_string)).collect(),
        _ => Vec::new(),
    }
}

fn str_field<'a>(body: &'a Value, name: &str) -> Result<&'a str, GatewayError> {
    body[name]
        .as_str()
        .ok_or_else(|| GatewayError::BadRequest(format!("missing string field {name}")))
}

fn may_act_for(claims: &Claims, user: &str) -> bool {
    claims.sub == user || claims.has_scope("admin")
}

impl Gateway {
    pub fn new(tb: Arc<Testbed>) -> Self {
        Self::with_limits(tb, BucketConfig::default())
    }

    pub fn with_limits(tb: Arc<Testbed>, limits: BucketConfig) -> Self {
        let router = Router::new(router::default_routes()).expect("built-in routes are unambiguous");
        Gateway {
            limiter: RateLimiter::new(tb.clock.clone(), limits),
            tb,
            router,
            forwarded: Default::default(),
            rejected: AtomicU64::new(0),
        }
    }

    pub fn testbed(&self) -> &Arc<Testbed> {
        &self.tb
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    pub fn limiter(&self) -> &RateLimiter {
        &self.limiter
    }

    /// Requests forwarded to the given service so far.
    pub fn forwarded(&self, target: Target) -> u64 {
        self.forwarded[target_index(target)].load(Ordering::Relaxed)
    }

    /// Requests turned away before reaching a service.
    pub fn rejected(&self) -> u64 {
        self.rejected.load(Ordering::Relaxed)
    }

    pub fn dispatch(&self, req: &Request) -> Response {
        let correlation_id = match req.headers.get(CORRELATION_HEADER) {
            Some(c) if !c.is_empty() => c.clone(),
            _ => self.tb.ids.next("req"),
        };
        let (status, body) = match self.handle(req, &correlation_id) {
            Ok(out) => out,
            Err(e) => (e.status(), json!({"error": e.code(), "message": e.to_string()})),
        };
        Response {
            status,
            body,
            correlation_id,
        }
    }

    fn handle(&self, req: &Request, correlation_id: &str) -> Outcome {
        let (path, query) = req.path_and_query();
        let bearer = req
            .headers
            .get("authorization")
            .map(|h| h.strip_prefix("Bearer ").unwrap_or(h).trim());
        let verified = bearer.map(|t| self.tb.tokens.authenticate(t));

        // 1. rate limit, keyed by the token subject when it verifies
        let client = match &verified {
            Some(Ok(c)) => c.sub.as_str(),
            _ => req.source.as_str(),
        };
        if self.limiter.check_rate(client) == Decision::Deny {
            return self.reject(GatewayError::RateLimited);
        }

        let matched = self.router.find(req.method, path);
        let public = matched.as_ref().is_some_and(|m| m.route.access == Access::Public);

        // 2. token; public routes ignore a bad token instead of failing
        let claims = match verified {
            Some(Ok(c)) => Some(c),
            Some(Err(e)) if !public => return self.reject(e.into()),
            None if !public => return self.reject(GatewayError::Unauthenticated("missing bearer token".into())),
            _ => None,
        };

        // 3. scope, then revocation
        if let (Some(m), Some(c)) = (&matched, &claims) {
            if let Access::Scope(s) = m.route.access {
                if !c.has_scope(s) {
                    return self.reject(GatewayError::Forbidden(format!("token lacks scope {s}")));
                }
            }
        }
        if let Some(c) = &claims {
            if !public {
                if let Err(e) = self.tb.tokens.check_revoked(c) {
                    return self.reject(e.into());
                }
            }
        }

        // 4. route
        let Some(m) = matched else {
            return self.reject(GatewayError::NoRoute(format!("{} {}", req.method, path)));
        };

        // 5. forward
        self.forwarded[target_index(m.route.target)].fetch_add(1, Ordering::Relaxed);
        self.forward(&m, req, &query, claims.as_ref(), correlation_id)
    }

    fn reject(&self, e: GatewayError) -> Outcome {
        self.rejected.fetch_add(1, Ordering::Relaxed);
        Err(e)
    }

    fn forward(
        &self,
        m: &Matched<'_>,
        req: &Request,
        query: &BTreeMap<String, String>,
        claims: Option<&Claims>,
        correlation_id: &str,
    ) -> Outcome {
        let tb = &self.tb;
        let body = req.body.clone().unwrap_or(Value::Null);
        let param = |name: &str| m.params.get(name).map(String::as_str).unwrap_or_default();
        let claims = || claims.ok_or_else(|| GatewayError::Unauthenticated("missing bearer token".into()));
        match m.route.handler {
            Handler::Token => self.token(&body),
            Handler::SearchFlights => {
                let q = |k: &str| {
                    query
                        .get(k)
                        .map(String::as_str)
                        .ok_or_else(|| GatewayError::BadRequest(format!("missing query parameter {k}")))
                };
                let v = tb.flights.search_flights(q("origin")?, q("destination")?, q("date")?)?;
                Ok((200, (*v).clone()))
            }
            Handler::FlightDetail => Ok((200, (*tb.flights.flight_detail(param("id"))?).clone())),
            Handler::CreateBooking => {
                let c = claims()?;
                let flight = str_field(&body, "flight_id")?;
                let seats = match &body["seats"] {
                    Value::Null => 1,
                    v => v
                        .as_u64()
                        .filter(|n| (1..=u64::from(u32::MAX)).contains(n))
                        .ok_or_else(|| GatewayError::BadRequest("seats must be a positive integer".into()))?
                        as u32,
                };
                let result = tb.bookings.create_booking(&c.sub, flight, seats, correlation_id)?;
                let status = if matches!(result, crate::services::BookingResult::Confirmed { .. }) {
                    201
                } else {
                    200
                };
                Ok((status, serde_json::to_value(result).expect("result serializes")))
            }
            Handler::ListBookings => {
                let c = claims()?;
                Ok((200, tb.bookings_section(&c.sub)?))
            }
            Handler::GetBooking => {
                let c = claims()?;
                let b = tb.bookings.get_booking(param("id"))?;
                if !may_act_for(c, &b.user_id) {
                    return Err(GatewayError::NotFound(format!("booking {}", param("id"))));
                }
                Ok((200, serde_json::to_value(b).expect("booking serializes")))
            }
            Handler::GetPayment => {
                let c = claims()?;
                let p = tb.payments.get_payment(param("id"))?;
                if !may_act_for(c, &p.user_id) {
                    return Err(GatewayError::NotFound(format!("payment {}", param("id"))));
                }
                Ok((200, serde_json::to_value(p).expect("payment serializes")))
            }
            Handler::GetUser => {
                let user = param("id");
                if !may_act_for(claims()?, user) {
                    return Err(GatewayError::Forbidden(format!("not allowed to read {user}")));
                }
                Ok((200, tb.profile_section(user)?))
            }
            Handler::PutUser => {
                let user = param("id");
                if !may_act_for(claims()?, user) {
                    return Err(GatewayError::Forbidden(format!("not allowed to update {user}")));
                }
                Ok((200, (*tb.profiles.update_profile(user, &body)?).clone()))
            }
            Handler::GetTrip => {
                let user = param("userId");
                if !may_act_for(claims()?, user) {
                    return Err(GatewayError::Forbidden(format!("not allowed to read trips of {user}")));
                }
                let selection = match &body {
                    Value::Null => Selection::full(),
                    v => Selection::parse(v)?,
                };
                Ok((200, self.aggregate(user, &selection)?))
            }
        }
    }

    fn token(&self, body: &Value) -> Outcome {
        let tokens = &self.tb.tokens;
        let issued = match body["grant_type"].as_str() {
            Some("password") => tokens.issue(str_field(body, "username")?, str_field(body, "password")?, &scopes_from(body))?,
            Some("refresh" | "refresh_token") => tokens.refresh(str_field(body, "refresh_token")?)?,
            Some("client_credentials") => {
                tokens.issue_client(str_field(body, "client_id")?, str_field(body, "client_secret")?, &scopes_from(body))?
            }
            _ => return Err(GatewayError::BadRequest("unsupported grant_type".into())),
        };
        Ok((200, serde_json::to_value(issued.response()).expect("token response serializes")))
    }

    /// Builds the trip document for `user` restricted to `selection`. A
    /// section whose service fails carries an error marker instead of data.
    pub fn aggregate(&self, user: &str, selection: &Selection) -> Result<Value, GatewayError> {
        let tb = &self.tb;
        if !tb.profiles.user_exists(user)? {
            return Err(GatewayError::NotFound(format!("user {user}")));
        }
        let mut doc = serde_json::Map::new();
        for (section, fields) in &selection.0 {
            let data = match section.as_str() {
                "profile" => tb.profile_section(user),
                "bookings" => tb.bookings_section(user),
                "flights" => tb.flights_section(user),
                "payments" => tb.payments_section(user),
                other => return Err(SelectionError::UnknownSection(other.to_string()).into()),
            };
            let value = match data {
                Ok(v) => project(&v, fields),
                Err(e) => section_error(&e.to_string()),
            };
            doc.insert(section.clone(), value);
        }
        Ok(Value::Object(doc))
    }
}
