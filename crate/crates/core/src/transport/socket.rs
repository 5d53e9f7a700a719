//! TCP backend. Each registered endpoint owns a listener; each destination
//! gets one cached outbound connection, so order per (sender, recipient)
//! follows TCP stream order.

use std::collections::HashMap;
use std::io::{self, BufReader};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use super::frame::{read_frame, write_frame};
use super::{encode_for_send, BusEvent, DeliveryTicket, EndpointAddr, Mailbox, Registration, Transport, TransportError};
use crate::envelope::Envelope;

const CONNECT_TIMEOUT: Duration = Duration::from_secs(2);
const POLL: Duration = Duration::from_millis(5);

pub fn unix_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

struct Listener {
    stop: Arc<AtomicBool>,
}

#[derive(Default)]
struct Inner {
    listeners: Mutex<HashMap<EndpointAddr, Listener>>,
    conns: Mutex<HashMap<SocketAddr, Arc<Mutex<TcpStream>>>>,
    seq: Arc<AtomicU64>,
}

#[derive(Clone, Default)]
pub struct SocketTransport {
    inner: Arc<Inner>,
}

fn resolve(addr: &EndpointAddr) -> Result<SocketAddr, TransportError> {
    let EndpointAddr::Socket(hp) = addr else {
        return Err(TransportError::Unroutable(addr.clone()));
    };
    hp.to_socket_addrs()
        .ok()
        .and_then(|mut it| it.next())
        .ok_or_else(|| TransportError::Unroutable(addr.clone()))
}

impl SocketTransport {
    pub fn new() -> Self {
        Self::default()
    }

    fn connection(&self, sa: SocketAddr, addr: &EndpointAddr) -> Result<Arc<Mutex<TcpStream>>, TransportError> {
        let mut conns = self.inner.conns.lock().expect("conn table poisoned");
        if let Some(c) = conns.get(&sa) {
            return Ok(c.clone());
        }
        let stream = TcpStream::connect_timeout(&sa, CONNECT_TIMEOUT)
            .map_err(|source| TransportError::ConnectionFailed { addr: addr.clone(), source })?;
        stream.set_nodelay(true).ok();
        let c = Arc::new(Mutex::new(stream));
        conns.insert(sa, c.clone());
        Ok(c)
    }

    // Readers block until the peer closes its end. They hold the sequence
    // counter, not the transport, so dropping a transport closes its streams.
    fn spawn_reader(seq: Arc<AtomicU64>, stream: TcpStream, inbox: Mailbox, stop: Arc<AtomicBool>) {
        thread::spawn(move || {
            let mut reader = BufReader::new(stream);
            while let Ok(Some(bytes)) = read_frame(&mut reader) {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                // Malformed frames are dropped; framing itself stays in sync.
                if let Ok(envelope) = Envelope::from_bytes(&bytes) {
                    inbox.push_with(|| BusEvent {
                        seq: seq.fetch_add(1, Ordering::SeqCst),
                        envelope,
                        delivered_at: unix_ms(),
                    });
                }
            }
        });
    }
}

impl Transport for SocketTransport {
    fn register_endpoint(&self, addr: &EndpointAddr, inbox: Mailbox) -> Result<Registration, TransportError> {
        let sa = resolve(addr)?;
        let mut listeners = self.inner.listeners.lock().expect("listener table poisoned");
        if listeners.contains_key(addr) {
            return Err(TransportError::AddrInUse(addr.clone()));
        }
        let listener = TcpListener::bind(sa).map_err(|e| {
            if e.kind() == io::ErrorKind::AddrInUse {
                TransportError::AddrInUse(addr.clone())
            } else {
                TransportError::ConnectionFailed { addr: addr.clone(), source: e }
            }
        })?;
        let bound = EndpointAddr::Socket(listener.local_addr().expect("bound listener").to_string());
        listener.set_nonblocking(true).expect("nonblocking listener");
        let stop = Arc::new(AtomicBool::new(false));
        let (seq, stop2) = (self.inner.seq.clone(), stop.clone());
        thread::spawn(move || {
            while !stop2.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        stream.set_nonblocking(false).ok();
                        Self::spawn_reader(seq.clone(), stream, inbox.clone(), stop2.clone());
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
                    Err(_) => thread::sleep(POLL),
                }
            }
        });
        listeners.insert(bound.clone(), Listener { stop: stop.clone() });
        if &bound != addr && sa.port() != 0 {
            listeners.insert(addr.clone(), Listener { stop });
        }
        Ok(Registration { addr: bound })
    }

    fn deregister(&self, addr: &EndpointAddr) {
        if let Some(l) = self.inner.listeners.lock().expect("listener table poisoned").remove(addr) {
            l.stop.store(true, Ordering::Relaxed);
        }
    }

    fn send(&self, env: &Envelope, to: &EndpointAddr) -> Result<DeliveryTicket, TransportError> {
        let bytes = encode_for_send(env)?;
        let sa = resolve(to)?;
        for attempt in 0..2 {
            let conn = self.connection(sa, to)?;
            let result = {
                let mut stream = conn.lock().expect("connection poisoned");
                write_frame(&mut *stream, &bytes)
            };
            match result {
                Ok(()) => return Ok(DeliveryTicket { bytes: bytes.len() }),
                Err(source) => {
                    self.inner.conns.lock().expect("conn table poisoned").remove(&sa);
                    if attempt == 1 {
                        return Err(TransportError::ConnectionFailed { addr: to.clone(), source });
                    }
                }
            }
        }
        unreachable!("loop returns on the second attempt")
    }
}

impl Drop for Inner {
    fn drop(&mut self) {
        if let Ok(listeners) = self.listeners.lock() {
            for l in listeners.values() {
                l.stop.store(true, Ordering::Relaxed);
            }
        }
    }
}
