//! The exchange side: registration, nonce-pool preparation, policy-gated
//! signing and deferred release, served over framed TCP or HTTP.

pub mod clock;
pub mod http;
pub mod journal;
mod service;
pub mod tcp;

pub use clock::{Clock, ManualClock, SystemClock};
pub use http::HttpServer;
pub use service::{ExchangeService, ServiceError, Storage, MAX_PREPARE_BATCH};
pub use tcp::TcpServer;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

/// Background thread that releases due tickets.
pub struct TicketWorker {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl TicketWorker {
    pub fn spawn(service: Arc<ExchangeService>, every: Duration) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = std::thread::spawn(move || {
            while !flag.load(Ordering::SeqCst) {
                let n = service.process_due();
                if n > 0 {
                    log::info!("released {n} deferred request(s)");
                }
                std::thread::sleep(every);
            }
        });
        Self { stop, handle: Some(handle) }
    }
}

impl Drop for TicketWorker {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
