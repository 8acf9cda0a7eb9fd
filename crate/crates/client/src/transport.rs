//! Ways to reach the exchange.

use std::io::{BufReader, BufWriter};
use std::net::{IpAddr, TcpStream};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use apikey_core::wire::{read_frame, write_frame, Handler, Request, Response};
use apikey_service::http::path_for;

use crate::ClientError;

/// Environment variable naming the exchange: `tcp://host:port` or
/// `http://host:port`.
pub const SERVER_ENV: &str = "APIKEY_SERVER";

pub trait Transport: Send + Sync {
    fn call(&self, request: &Request) -> Result<Response, ClientError>;
}

impl<T: Transport + ?Sized> Transport for Arc<T> {
    fn call(&self, request: &Request) -> Result<Response, ClientError> {
        (**self).call(request)
    }
}

impl<T: Transport + ?Sized> Transport for &T {
    fn call(&self, request: &Request) -> Result<Response, ClientError> {
        (**self).call(request)
    }
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn call(&self, request: &Request) -> Result<Response, ClientError> {
        (**self).call(request)
    }
}

/// Calls a handler directly, presenting `peer` as the source address.
pub struct InProcess {
    handler: Arc<dyn Handler>,
    peer: Option<IpAddr>,
}

impl InProcess {
    pub fn new(handler: Arc<dyn Handler>, peer: Option<IpAddr>) -> Self {
        Self { handler, peer }
    }
}

impl Transport for InProcess {
    fn call(&self, request: &Request) -> Result<Response, ClientError> {
        // Serialized both ways, as on the wire.
        let wire = serde_json::to_vec(request)?;
        let request = serde_json::from_slice(&wire)?;
        let response = self.handler.handle(request, self.peer);
        Ok(serde_json::from_slice(&serde_json::to_vec(&response)?)?)
    }
}

struct Conn {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

/// Framed JSON over one persistent TCP connection, reopened on failure.
pub struct TcpTransport {
    addr: String,
    conn: Mutex<Option<Conn>>,
    timeout: Duration,
}

impl TcpTransport {
    pub fn new(addr: impl Into<String>) -> Self {
        Self { addr: addr.into(), conn: Mutex::new(None), timeout: Duration::from_secs(30) }
    }

    fn connect(&self) -> Result<Conn, ClientError> {
        let stream = TcpStream::connect(&self.addr)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(self.timeout))?;
        Ok(Conn { reader: BufReader::new(stream.try_clone()?), writer: BufWriter::new(stream) })
    }
}

impl Transport for TcpTransport {
    fn call(&self, request: &Request) -> Result<Response, ClientError> {
        let body = serde_json::to_vec(request)?;
        let mut guard = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            *guard = Some(self.connect()?);
        }
        let conn = guard.as_mut().expect("connected above");
        let result = write_frame(&mut conn.writer, &body).and_then(|_| read_frame(&mut conn.reader));
        match result {
            Ok(Some(frame)) => Ok(serde_json::from_slice(&frame)?),
            Ok(None) => {
                *guard = None;
                Err(ClientError::Transport("connection closed by exchange".into()))
            }
            Err(e) => {
                *guard = None;
                Err(e.into())
            }
        }
    }
}

/// The HTTP binding.
pub struct HttpTransport {
    base: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(base: impl Into<String>) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(30)).build();
        Self { base: base.into().trim_end_matches('/').to_owned(), agent }
    }
}

impl Transport for HttpTransport {
    fn call(&self, request: &Request) -> Result<Response, ClientError> {
        let (method, path) = path_for(request);
        let url = format!("{}{}", self.base, path);
        let result = if method == "GET" {
            self.agent.get(&url).call()
        } else {
            let mut body = serde_json::to_value(request)?;
            if let Some(obj) = body.as_object_mut() {
                obj.remove("method");
            }
            self.agent.post(&url).send_json(body)
        };
        let response = match result {
            Ok(r) => r,
            Err(ureq::Error::Status(_, r)) => r,
            Err(e) => return Err(ClientError::Transport(e.to_string())),
        };
        let text = response.into_string()?;
        serde_json::from_str(&text).map_err(|e| ClientError::Transport(format!("bad response body: {e}")))
    }
}

/// Builds a transport from a `tcp://` or `http://` endpoint.
pub fn connect(endpoint: &str) -> Result<Box<dyn Transport>, ClientError> {
    if let Some(addr) = endpoint.strip_prefix("tcp://") {
        Ok(Box::new(TcpTransport::new(addr)))
    } else if endpoint.starts_with("http://") {
        Ok(Box::new(HttpTransport::new(endpoint)))
    } else {
        Err(ClientError::Transport(format!("unsupported endpoint {endpoint:?}; use tcp:// or http://")))
    }
}

/// Transport named by [`SERVER_ENV`].
pub fn from_env() -> Result<Box<dyn Transport>, ClientError> {
    let endpoint = std::env::var(SERVER_ENV)
        .map_err(|_| ClientError::Transport(format!("{SERVER_ENV} is not set")))?;
    connect(&endpoint)
}

/// One request and its response, as bytes on the wire.
#[derive(Clone, Debug)]
pub struct TranscriptEntry {
    pub method: &'static str,
    pub request_bytes: usize,
    pub response_bytes: usize,
}

/// Wraps a transport and records every exchange it carries.
pub struct Recorder<T> {
    inner: T,
    log: Mutex<Vec<TranscriptEntry>>,
}

impl<T: Transport> Recorder<T> {
    pub fn new(inner: T) -> Self {
        Self { inner, log: Mutex::new(Vec::new()) }
    }

    pub fn transcript(&self) -> Vec<TranscriptEntry> {
        self.log.lock().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn clear(&self) {
        self.log.lock().unwrap_or_else(|p| p.into_inner()).clear();
    }
}

impl<T: Transport> Transport for Recorder<T> {
    fn call(&self, request: &Request) -> Result<Response, ClientError> {
        let request_bytes = serde_json::to_vec(request)?.len();
        let response = self.inner.call(request);
        let response_bytes = match &response {
            Ok(r) => serde_json::to_vec(r)?.len(),
            Err(_) => 0,
        };
        self.log.lock().unwrap_or_else(|p| p.into_inner()).push(TranscriptEntry {
            method: request.method(),
            request_bytes,
            response_bytes,
        });
        response
    }
}
