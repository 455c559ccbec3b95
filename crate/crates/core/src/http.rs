//! Loopback HTTP front end for the gateway, and a matching client.
//!
//! The server turns each HTTP exchange into a gateway [`Request`] and back.
//! The caller's network identity travels in `x-forwarded-for` so that a
//! load generator on one socket can still present many clients to the
//! rate limiter; without the header the peer address is used.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::{json, Value};

use crate::gateway::{Gateway, Method, Request, Response, CORRELATION_HEADER};
use crate::harness::Transport;

pub const FORWARDED_FOR: &str = "x-forwarded-for";

pub struct HttpServer {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    threads: Vec<JoinHandle<()>>,
}

fn error_body(code: &str, message: &str) -> Value {
    json!({"error": code, "message": message})
}

/// Converts an incoming exchange to a gateway request.
fn to_request(rq: &mut tiny_http::Request) -> Result<Request, (u16, Value)> {
    let method = Method::parse(rq.method().as_str())
        .ok_or_else(|| (405, error_body("method_not_allowed", rq.method().as_str())))?;
    let mut req = Request::new(method, rq.url());
    for h in rq.headers() {
        req = req.header(h.field.as_str().as_str(), h.value.as_str());
    }
    req.source = match req.headers.get(FORWARDED_FOR) {
        Some(s) => s.split(',').next().unwrap_or_default().trim().to_string(),
        None => rq.remote_addr().map(|a| a.ip().to_string()).unwrap_or_default(),
    };
    let mut raw = String::new();
    rq.as_reader()
        .read_to_string(&mut raw)
        .map_err(|e| (400, error_body("bad_request", &e.to_string())))?;
    if !raw.trim().is_empty() {
        let body = serde_json::from_str(&raw).map_err(|e| (400, error_body("bad_request", &format!("body is not JSON: {e}"))))?;
        req.body = Some(body);
    }
    Ok(req)
}

fn respond(rq: tiny_http::Request, status: u16, body: &Value, correlation: Option<&str>) {
    let mut resp = tiny_http::Response::from_string(body.to_string())
        .with_status_code(status)
        .with_header(tiny_http::Header::from_bytes("content-type", "application/json").expect("static header"));
    if let Some(c) = correlation {
        if let Ok(h) = tiny_http::Header::from_bytes(CORRELATION_HEADER, c) {
            resp = resp.with_header(h);
        }
    }
    // the client may have gone away; nothing useful to do about it
    let _ = rq.respond(resp);
}

impl HttpServer {
    /// Binds `listen` and serves the gateway on `threads` handler threads.
    pub fn start(gateway: Arc<Gateway>, listen: &str, threads: usize) -> std::io::Result<Self> {
        let server = tiny_http::Server::http(listen).map_err(std::io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("listener has no IP address"))?;
        let server = Arc::new(server);
        let threads = (0..threads.max(1))
            .map(|_| {
                let (server, gateway) = (server.clone(), gateway.clone());
                std::thread::spawn(move || {
                    while let Ok(mut rq) = server.recv() {
                        match to_request(&mut rq) {
                            Ok(req) => {
                                let out = gateway.dispatch(&req);
                                respond(rq, out.status, &out.body, Some(&out.correlation_id));
                            }
                            Err((status, body)) => respond(rq, status, &body, None),
                        }
                    }
                })
            })
            .collect();
        Ok(HttpServer { server, addr, threads })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the process is killed.
    pub fn wait(self) {
        for t in self.threads {
            let _ = t.join();
        }
    }

    /// Stops accepting and joins the handler threads.
    pub fn shutdown(self) {
        for _ in &self.threads {
            self.server.unblock();
        }
        for t in self.threads {
            let _ = t.join();
        }
    }
}

/// Sends gateway requests over HTTP.
pub struct HttpClient {
    base: String,
    agent: ureq::Agent,
}

impl HttpClient {
    pub fn new(base: &str) -> Self {
        HttpClient {
            base: base.trim_end_matches('/').to_string(),
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(30))
                .max_idle_connections_per_host(64)
                .build(),
        }
    }
}

impl Transport for HttpClient {
    fn send(&self, req: &Request) -> Result<Response, String> {
        let mut call = self.agent.request(req.method.as_str(), &format!("{}{}", self.base, req.path));
        for (k, v) in &req.headers {
            call = call.set(k, v);
        }
        call = call.set(FORWARDED_FOR, &req.source);
        let result = match &req.body {
            Some(b) => call.set("content-type", "application/json").send_string(&b.to_string()),
            None => call.call(),
        };
        let resp = match result {
            Ok(r) => r,
            Err(ureq::Error::Status(_, r)) => r,
            Err(e) => return Err(e.to_string()),
        };
        let status = resp.status();
        let correlation_id = resp.header(CORRELATION_HEADER).unwrap_or_default().to_string();
        let text = resp.into_string().map_err(|e| e.to_string())?;
        let body = if text.is_empty() {
            Value::Null
        } else {
            serde_json::from_str(&text).map_err(|e| format!("response is not JSON: {e}"))?
        };
        Ok(Response {
            status,
            body,
            correlation_id,
        })
    }
}
