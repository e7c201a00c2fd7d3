//! A small in-process HTTP server speaking the remote next-token protocol,
//! backed by any local [`PolicyBackend`]. Faults can be scripted for the
//! first requests to exercise client retry handling.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use super::remote::{WireRequest, WireResponse, ROUTE};
use super::PolicyBackend;
use crate::mdp::{State, TokenId};

/// Scripted misbehavior for one request.
#[derive(Clone, Debug)]
pub enum StubFault {
    /// Sleep before answering normally.
    Delay(Duration),
    /// Answer with this status and an empty body.
    Status(u16),
    /// Answer 200 with this raw body.
    Body(String),
}

type Handler = dyn Fn(&WireRequest) -> Result<String, String> + Send + Sync;

pub struct StubServer {
    addr: SocketAddr,
    server: Arc<tiny_http::Server>,
    requests: Arc<AtomicUsize>,
    thread: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Serves top-k distributions from `policy`, treating the request
    /// context as a prompt with nothing generated.
    pub fn serve_policy(
        policy: Arc<dyn PolicyBackend>,
        faults: Vec<StubFault>,
    ) -> std::io::Result<Self> {
        Self::with_handler(
            move |req| {
                let state = State::new(req.context.iter().copied().map(TokenId).collect());
                policy
                    .top_k(&state, req.k, req.temperature)
                    .map(|d| {
                        serde_json::to_string(&WireResponse::from_distribution(&d))
                            .expect("serializable")
                    })
                    .map_err(|e| e.to_string())
            },
            faults,
        )
    }

    pub fn with_handler<F>(handler: F, faults: Vec<StubFault>) -> std::io::Result<Self>
    where
        F: Fn(&WireRequest) -> Result<String, String> + Send + Sync + 'static,
    {
        let server = tiny_http::Server::http("127.0.0.1:0")
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("stub server has no ip address"))?;
        let server = Arc::new(server);
        let requests = Arc::new(AtomicUsize::new(0));
        let handler: Arc<Handler> = Arc::new(handler);
        let faults = Arc::new(faults);
        let thread = {
            let server = Arc::clone(&server);
            let requests = Arc::clone(&requests);
            std::thread::spawn(move || {
                for req in server.incoming_requests() {
                    let n = requests.fetch_add(1, Ordering::SeqCst);
                    let fault = faults.get(n).cloned();
                    let handler = Arc::clone(&handler);
                    std::thread::spawn(move || respond(req, fault, handler.as_ref()));
                }
            })
        };
        Ok(Self {
            addr,
            server,
            requests,
            thread: Some(thread),
        })
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Requests received so far, including faulted ones.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

fn respond(mut req: tiny_http::Request, fault: Option<StubFault>, handler: &Handler) {
    let reply = |req: tiny_http::Request, code: u16, body: String| {
        let header = tiny_http::Header::from_bytes("Content-Type", "application/json")
            .expect("static header");
        // The client may already have given up; a failed write is fine.
        let _ = req.respond(
            tiny_http::Response::from_string(body)
                .with_status_code(code)
                .with_header(header),
        );
    };
    if req.method() != &tiny_http::Method::Post || req.url() != ROUTE {
        return reply(req, 404, String::new());
    }
    let mut raw = String::new();
    if req.as_reader().read_to_string(&mut raw).is_err() {
        return reply(req, 400, String::new());
    }
    match fault {
        Some(StubFault::Status(code)) => return reply(req, code, String::new()),
        Some(StubFault::Body(body)) => return reply(req, 200, body),
        Some(StubFault::Delay(d)) => std::thread::sleep(d),
        None => {}
    }
    match serde_json::from_str::<WireRequest>(&raw) {
        Ok(wire) => match handler(&wire) {
            Ok(body) => reply(req, 200, body),
            Err(msg) => reply(req, 422, msg),
        },
        Err(e) => reply(req, 400, e.to_string()),
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
