//! Message delivery with two interchangeable backends: a deterministic
//! in-memory bus for simulation and TCP sockets for live deployment.
//!
//! Both backends preserve per-pair FIFO order and never drop or duplicate a
//! message once `send` has returned successfully.

pub mod frame;
pub mod runtime;
pub mod sim;
pub mod socket;

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envelope::Envelope;

pub use runtime::{actor_ref, Actor, ActorCtx, LiveNetwork, LogEntry, Note, SimNetwork};
pub use sim::SimBus;
pub use socket::SocketTransport;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EndpointAddr {
    Sim(String),
    Socket(String),
}

impl EndpointAddr {
    pub fn sim(name: impl fmt::Display) -> Self {
        EndpointAddr::Sim(name.to_string())
    }
}

impl fmt::Display for EndpointAddr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EndpointAddr::Sim(n) => write!(f, "sim:{n}"),
            EndpointAddr::Socket(a) => write!(f, "socket:{a}"),
        }
    }
}

impl FromStr for EndpointAddr {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if let Some(n) = s.strip_prefix("sim:") {
            if n.is_empty() {
                return Err("empty sim name".into());
            }
            Ok(EndpointAddr::Sim(n.to_string()))
        } else if let Some(a) = s.strip_prefix("socket:") {
            if !a.contains(':') {
                return Err(format!("expected host:port, got {a:?}"));
            }
            Ok(EndpointAddr::Socket(a.to_string()))
        } else {
            Err(format!("unknown endpoint kind in {s:?}"))
        }
    }
}

/// One delivered envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusEvent {
    pub seq: u64,
    pub envelope: Envelope,
    pub delivered_at: u64,
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("address already registered: {0}")]
    AddrInUse(EndpointAddr),
    #[error("no endpoint registered at {0}")]
    Unroutable(EndpointAddr),
    #[error("frame of {0} bytes exceeds the 16 MiB limit")]
    FrameTooLarge(usize),
    #[error("connection to {addr} failed: {source}")]
    ConnectionFailed { addr: EndpointAddr, source: std::io::Error },
    #[error("operation requires the simulation backend")]
    NotSimBackend,
    #[error("envelope rejected: {0}")]
    BadEnvelope(String),
}

/// Receipt for a send. On the sim bus the message is queued; on sockets the
/// frame has been written.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeliveryTicket {
    pub bytes: usize,
}

/// Handle returned by `register_endpoint`; carries the bound address
/// (socket endpoints registered on port 0 learn their real port here).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Registration {
    pub addr: EndpointAddr,
}

/// Thread-safe FIFO inbox that a transport delivers into.
#[derive(Clone, Default)]
pub struct Mailbox {
    inner: Arc<(Mutex<VecDeque<BusEvent>>, Condvar)>,
}

impl Mailbox {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, ev: BusEvent) {
        let (lock, cv) = &*self.inner;
        lock.lock().expect("mailbox poisoned").push_back(ev);
        cv.notify_all();
    }

    /// Pushes an event whose sequence number is assigned under the mailbox
    /// lock, so events land in this mailbox in increasing `seq` order.
    pub(crate) fn push_with(&self, make: impl FnOnce() -> BusEvent) {
        let (lock, cv) = &*self.inner;
        lock.lock().expect("mailbox poisoned").push_back(make());
        cv.notify_all();
    }

    pub fn pop(&self) -> Option<BusEvent> {
        self.inner.0.lock().expect("mailbox poisoned").pop_front()
    }

    pub fn pop_timeout(&self, timeout: Duration) -> Option<BusEvent> {
        let (lock, cv) = &*self.inner;
        let guard = lock.lock().expect("mailbox poisoned");
        let (mut guard, _) = cv
            .wait_timeout_while(guard, timeout, |q| q.is_empty())
            .expect("mailbox poisoned");
        guard.pop_front()
    }

    pub fn drain(&self) -> Vec<BusEvent> {
        self.inner.0.lock().expect("mailbox poisoned").drain(..).collect()
    }

    pub fn len(&self) -> usize {
        self.inner.0.lock().expect("mailbox poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Debug for Mailbox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Mailbox({} queued)", self.len())
    }
}

/// Common surface of both backends.
pub trait Transport: Send + Sync {
    fn register_endpoint(&self, addr: &EndpointAddr, inbox: Mailbox) -> Result<Registration, TransportError>;

    fn deregister(&self, addr: &EndpointAddr);

    fn send(&self, env: &Envelope, to: &EndpointAddr) -> Result<DeliveryTicket, TransportError>;

    /// Delivers everything queued and advances the logical clock. Sim only.
    fn step(&self) -> Result<Vec<BusEvent>, TransportError> {
        Err(TransportError::NotSimBackend)
    }
}

pub(crate) fn encode_for_send(env: &Envelope) -> Result<Vec<u8>, TransportError> {
    env.check().map_err(|e| TransportError::BadEnvelope(e.to_string()))?;
    let bytes = env.to_bytes().map_err(|e| TransportError::BadEnvelope(e.to_string()))?;
    if bytes.len() > frame::MAX_FRAME {
        return Err(TransportError::FrameTooLarge(bytes.len()));
    }
    Ok(bytes)
}
