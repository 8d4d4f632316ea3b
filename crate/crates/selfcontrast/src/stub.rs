//! Loopback embedding server that answers with hashed n-gram vectors.
//!
//! Used as the oracle for the remote embedder contract and as a stand-in
//! service for local runs. Fault modes let tests exercise each error path.

use std::io;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use serde::Deserialize;
use tiny_http::{Header, Method, Response, Server};

use selfcontrast_core::filter::HashedNgramEmbedder;

/// How the stub misbehaves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Omits the last vector of every reply.
    DropLast,
    /// Appends one extra vector to every reply.
    ExtraVector,
    /// Truncates every vector by one entry.
    WrongDim,
    /// Replies with a body that is not the expected JSON.
    Malformed,
    /// Answers HTTP 503 to the first `n` requests, then behaves.
    FailFirst(usize),
    /// Always answers with this status code.
    Status(u16),
}

#[derive(Deserialize)]
struct Request {
    texts: Vec<String>,
}

/// A running stub. Dropping it stops the server thread.
pub struct StubServer {
    server: Arc<Server>,
    addr: SocketAddr,
    requests: Arc<AtomicUsize>,
    handle: Option<JoinHandle<()>>,
}

impl StubServer {
    /// Binds to `addr` (use port 0 for an ephemeral port) and serves in a
    /// background thread.
    pub fn start(addr: &str, embedder: HashedNgramEmbedder, fault: Fault) -> io::Result<Self> {
        let server = Arc::new(Server::http(addr).map_err(io::Error::other)?);
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| io::Error::other("stub server is not bound to an IP address"))?;
        let requests = Arc::new(AtomicUsize::new(0));
        let handle = {
            let server = Arc::clone(&server);
            let requests = Arc::clone(&requests);
            thread::spawn(move || {
                for req in server.incoming_requests() {
                    let n = requests.fetch_add(1, Ordering::SeqCst);
                    if let Err(e) = handle(req, &embedder, fault, n) {
                        log::warn!("stub server: {e}");
                    }
                }
            })
        };
        Ok(StubServer { server, addr, requests, handle: Some(handle) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Full endpoint URL, including the `/embed` path.
    pub fn url(&self) -> String {
        format!("http://{}/embed", self.addr)
    }

    /// Number of requests received so far.
    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    /// Serves until the process is killed.
    pub fn join(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn json_header() -> Header {
    Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).expect("static header is valid")
}

fn reply(req: tiny_http::Request, status: u16, body: String) -> io::Result<()> {
    req.respond(Response::from_string(body).with_status_code(status).with_header(json_header()))
}

fn handle(mut req: tiny_http::Request, embedder: &HashedNgramEmbedder, fault: Fault, n: usize) -> io::Result<()> {
    if req.url() != "/embed" {
        return reply(req, 404, r#"{"error":"not found"}"#.into());
    }
    if *req.method() != Method::Post {
        return reply(req, 405, r#"{"error":"use POST"}"#.into());
    }
    let mut body = String::new();
    req.as_reader().read_to_string(&mut body)?;
    match fault {
        Fault::Status(code) => return reply(req, code, r#"{"error":"injected"}"#.into()),
        Fault::FailFirst(k) if n < k => return reply(req, 503, r#"{"error":"try again"}"#.into()),
        Fault::Malformed => return reply(req, 200, r#"{"embeddings": "#.into()),
        _ => {}
    }
    let parsed: Request = match serde_json::from_str(&body) {
        Ok(p) => p,
        Err(e) => return reply(req, 400, serde_json::json!({ "error": e.to_string() }).to_string()),
    };
    let mut vectors = Vec::with_capacity(parsed.texts.len());
    for t in &parsed.texts {
        match embedder.embed_one(t) {
            Ok(v) => vectors.push(v.0),
            Err(e) => return reply(req, 400, serde_json::json!({ "error": format!("{e}: {t:?}") }).to_string()),
        }
    }
    match fault {
        Fault::DropLast => {
            vectors.pop();
        }
        Fault::ExtraVector => vectors.push(vec![0.0; embedder.dim]),
        Fault::WrongDim => vectors.iter_mut().for_each(|v| {
            v.pop();
        }),
        _ => {}
    }
    reply(req, 200, serde_json::json!({ "embeddings": vectors }).to_string())
}
