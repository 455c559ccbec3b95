//! Route table with `{param}` path segments.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Get,
    Post,
    Put,
    Delete,
}

impl Method {
    pub fn parse(s: &str) -> Option<Method> {
        match s.to_ascii_uppercase().as_str() {
            "GET" => Some(Method::Get),
            "POST" => Some(Method::Post),
            "PUT" => Some(Method::Put),
            "DELETE" => Some(Method::Delete),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Get => "GET",
            Method::Post => "POST",
            Method::Put => "PUT",
            Method::Delete => "DELETE",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Who may call a route.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Access {
    Public,
    Scope(&'static str),
}

/// Owning service of a route.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Auth,
    Flight,
    Booking,
    Payment,
    Profile,
    Aggregator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Handler {
    Token,
    SearchFlights,
    FlightDetail,
    CreateBooking,
    ListBookings,
    GetBooking,
    GetPayment,
    GetUser,
    PutUser,
    GetTrip,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Route {
    pub method: Method,
    pub pattern: &'static str,
    pub target: Target,
    pub access: Access,
    pub handler: Handler,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Param(String),
}

fn parse_pattern(p: &str) -> Vec<Segment> {
    p.trim_matches('/')
        .split('/')
        .map(|s| match s.strip_prefix('{').and_then(|s| s.strip_suffix('}')) {
            Some(name) => Segment::Param(name.to_string()),
            None => Segment::Literal(s.to_string()),
        })
        .collect()
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("routes {0} and {1} can match the same request")]
pub struct AmbiguousRoutes(pub String, pub String);

/// A matched route with its path parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Matched<'r> {
    pub route: &'r Route,
    pub params: BTreeMap<String, String>,
}

#[derive(Debug)]
pub struct Router {
    routes: Vec<(Route, Vec<Segment>)>,
}

impl Router {
    /// Builds the table, refusing any pair of routes that could both match
    /// one request.
    pub fn new(routes: Vec<Route>) -> Result<Self, AmbiguousRoutes> {
        let parsed: Vec<_> = routes
            .into_iter()
            .map(|r| {
                let segs = parse_pattern(r.pattern);
                (r, segs)
            })
            .collect();
        for (i, (a, sa)) in parsed.iter().enumerate() {
            for (b, sb) in &parsed[i + 1..] {
                if a.method == b.method && overlap(sa, sb) {
                    return Err(AmbiguousRoutes(
                        format!("{} {}", a.method, a.pattern),
                        format!("{} {}", b.method, b.pattern),
                    ));
                }
            }
        }
        Ok(Router { routes: parsed })
    }

    pub fn routes(&self) -> impl Iterator<Item = &Route> {
        self.routes.iter().map(|(r, _)| r)
    }

    /// Finds the route for `path` (without query string).
    pub fn find(&self, method: Method, path: &str) -> Option<Matched<'_>> {
        let parts: Vec<&str> = path.trim_matches('/').split('/').collect();
        self.routes.iter().find_map(|(route, segs)| {
            if route.method != method || segs.len() != parts.len() {
                return None;
            }
            let mut params = BTreeMap::new();
            for (seg, part) in segs.iter().zip(&parts) {
                match seg {
                    Segment::Literal(l) if l == part => {}
                    Segment::Param(name) if !part.is_empty() => {
                        params.insert(name.clone(), (*part).to_string());
                    }
                    _ => return None,
                }
            }
            Some(Matched { route, params })
        })
    }
}

fn overlap(a: &[Segment], b: &[Segment]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|pair| match pair {
            (Segment::Literal(x), Segment::Literal(y)) => x == y,
            _ => true,
        })
}

/// The gateway's routes, all under `/v1/`.
pub fn default_routes() -> Vec<Route> {
    use Access::{Public, Scope};
    let r = |method, pattern, target, access, handler| Route {
        method,
        pattern,
        target,
        access,
        handler,
    };
    vec![
        r(Method::Post, "/v1/auth/token", Target::Auth, Public, Handler::Token),
        r(Method::Get, "/v1/flights", Target::Flight, Public, Handler::SearchFlights),
        r(Method::Get, "/v1/flights/{id}", Target::Flight, Public, Handler::FlightDetail),
        r(Method::Post, "/v1/bookings", Target::Booking, Scope("booking.write"), Handler::CreateBooking),
        r(Method::Get, "/v1/bookings", Target::Booking, Scope("booking.read"), Handler::ListBookings),
        r(Method::Get, "/v1/bookings/{id}", Target::Booking, Scope("booking.read"), Handler::GetBooking),
        r(Method::Get, "/v1/payments/{id}", Target::Payment, Scope("payment.read"), Handler::GetPayment),
        r(Method::Get, "/v1/users/{id}", Target::Profile, Scope("profile.read"), Handler::GetUser),
        r(Method::Put, "/v1/users/{id}", Target::Profile, Scope("profile.write"), Handler::PutUser),
        r(Method::Get, "/v1/trips/{userId}", Target::Aggregator, Scope("profile.read"), Handler::GetTrip),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_table_is_unambiguous() {
        let router = Router::new(default_routes()).unwrap();
        let m = router.find(Method::Get, "/v1/bookings/bk-1").unwrap();
        assert_eq!(m.route.handler, Handler::GetBooking);
        assert_eq!(m.params["id"], "bk-1");
        assert_eq!(router.find(Method::Get, "/v1/bookings").unwrap().route.handler, Handler::ListBookings);
        assert_eq!(router.find(Method::Post, "/v1/bookings").unwrap().route.handler, Handler::CreateBooking);
        assert!(router.find(Method::Delete, "/v1/bookings").is_none());
        assert!(router.find(Method::Get, "/v1/hotels").is_none());
    }

    #[test]
    fn overlapping_patterns_are_refused() {
        let mut routes = default_routes();
        routes.push(Route {
            method: Method::Get,
            pattern: "/v1/bookings/latest",
            target: Target::Booking,
            access: Access::Public,
            handler: Handler::ListBookings,
        });
        assert!(Router::new(routes).is_err());
    }
}
