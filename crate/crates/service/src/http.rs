//! JSON over HTTP. Each method has its own path; the body is the request
//! without its `method` tag.

use std::io::Read;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use apikey_core::wire::{ErrorCode, Handler, Request, Response, MAX_FRAME_LEN};
use serde_json::Value;
use tiny_http::{Header, Server};

const NO_ENDPOINT: &str = "no such endpoint";

pub struct HttpServer {
    server: Arc<Server>,
    addr: SocketAddr,
    workers: Vec<JoinHandle<()>>,
}

/// Maps a method and path to the `method` tag of a [`Request`].
pub fn route(method: &str, path: &str) -> Option<(&'static str, Option<String>)> {
    let path = path.split('?').next().unwrap_or(path);
    let tag = match (method, path) {
        ("POST", "/v1/register") => "register",
        ("POST", "/v1/pool") => "prepare",
        ("POST", "/v1/sign") => "sign",
        ("POST", "/v1/policy") => "update_policy",
        ("POST", "/v1/cancel") => "cancel",
        ("GET", "/v1/paillier") => "paillier",
        ("GET", "/v1/health") => "health",
        ("GET", p) => {
            let id = p.strip_prefix("/v1/tickets/")?;
            if id.is_empty() || id.contains('/') {
                return None;
            }
            return Some(("ticket_status", Some(id.to_owned())));
        }
        _ => return None,
    };
    Some((tag, None))
}

/// Path and HTTP method a request is sent to.
pub fn path_for(request: &Request) -> (&'static str, String) {
    match request {
        Request::Register(_) => ("POST", "/v1/register".into()),
        Request::Prepare(_) => ("POST", "/v1/pool".into()),
        Request::Sign(_) => ("POST", "/v1/sign".into()),
        Request::UpdatePolicy(_) => ("POST", "/v1/policy".into()),
        Request::Cancel(_) => ("POST", "/v1/cancel".into()),
        Request::TicketStatus { ticket_id } => ("GET", format!("/v1/tickets/{ticket_id}")),
        Request::Paillier => ("GET", "/v1/paillier".into()),
        Request::Health => ("GET", "/v1/health".into()),
    }
}

fn decode(method: &str, url: &str, body: &[u8]) -> Result<Request, Response> {
    let (tag, ticket) = route(method, url).ok_or_else(|| Response::error(ErrorCode::Malformed, NO_ENDPOINT))?;
    let mut value = if body.iter().all(u8::is_ascii_whitespace) {
        Value::Object(Default::default())
    } else {
        serde_json::from_slice(body).map_err(|e| Response::error(ErrorCode::Malformed, e.to_string()))?
    };
    let obj = value.as_object_mut().ok_or_else(|| Response::error(ErrorCode::Malformed, "body must be an object"))?;
    obj.insert("method".into(), Value::from(tag));
    if let Some(id) = ticket {
        obj.insert("ticket_id".into(), Value::from(id));
    }
    serde_json::from_value(value).map_err(|e| Response::error(ErrorCode::Malformed, e.to_string()))
}

impl HttpServer {
    pub fn bind(addr: &str, handler: Arc<dyn Handler>, threads: usize) -> std::io::Result<Self> {
        let server = Arc::new(Server::http(addr).map_err(|e| std::io::Error::other(e.to_string()))?);
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("HTTP server is not bound to an IP address"))?;
        let workers = (0..threads.max(1))
            .map(|i| {
                let server = server.clone();
                let handler = handler.clone();
                std::thread::Builder::new()
                    .name(format!("http-{i}"))
                    .spawn(move || serve(&server, handler.as_ref()))
            })
            .collect::<std::io::Result<Vec<_>>>()?;
        Ok(Self { server, addr, workers })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&mut self) {
        self.server.unblock();
        for _ in 1..self.workers.len() {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn serve(server: &Server, handler: &dyn Handler) {
    let json = Header::from_bytes("Content-Type", "application/json").expect("static header");
    while let Ok(mut req) = server.recv() {
        let peer = req.remote_addr().map(|a| a.ip());
        let mut body = Vec::new();
        let read = req.as_reader().take(MAX_FRAME_LEN as u64 + 1).read_to_end(&mut body);
        let response = match read {
            Err(e) => Response::error(ErrorCode::Malformed, e.to_string()),
            Ok(_) if body.len() > MAX_FRAME_LEN => Response::error(ErrorCode::Malformed, "body too large"),
            Ok(_) => match decode(req.method().as_str(), req.url(), &body) {
                Ok(request) => handler.handle(request, peer),
                Err(resp) => resp,
            },
        };
        let status = match &response {
            Response::Error { code: ErrorCode::Malformed, message } if message == NO_ENDPOINT => 404,
            _ => response.http_status(),
        };
        let bytes = serde_json::to_vec(&response).unwrap_or_default();
        let out = tiny_http::Response::from_data(bytes).with_status_code(status).with_header(json.clone());
        if let Err(e) = req.respond(out) {
            log::debug!("could not send response: {e}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routes_cover_every_method() {
        let reqs = [
            Request::Health,
            Request::Paillier,
            Request::TicketStatus { ticket_id: "abc".into() },
        ];
        for r in reqs {
            let (m, p) = path_for(&r);
            let decoded = decode(m, &p, b"").unwrap();
            assert_eq!(decoded, r);
        }
        assert!(route("GET", "/v1/tickets/").is_none());
        assert!(route("DELETE", "/v1/sign").is_none());
        assert_eq!(route("POST", "/v1/pool").unwrap().0, "prepare");
    }
}
