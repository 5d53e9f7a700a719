//! Deterministic in-memory bus. Sends are queued; `step` delivers everything
//! queued in global order (send tick, then sender name, then per-sender send
//! order) and advances the logical clock by one.

use std::collections::HashMap;
use std::sync::Mutex;

use super::{encode_for_send, BusEvent, DeliveryTicket, EndpointAddr, Mailbox, Registration, Transport, TransportError};
use crate::envelope::Envelope;

struct Queued {
    send_tick: u64,
    sender: String,
    sender_index: u64,
    to: EndpointAddr,
    envelope: Envelope,
}

#[derive(Default)]
struct State {
    clock: u64,
    next_seq: u64,
    endpoints: HashMap<EndpointAddr, Mailbox>,
    queue: Vec<Queued>,
    sent_by: HashMap<String, u64>,
}

#[derive(Default)]
pub struct SimBus {
    state: Mutex<State>,
}

impl SimBus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clock(&self) -> u64 {
        self.state.lock().expect("bus poisoned").clock
    }

    pub fn queued(&self) -> usize {
        self.state.lock().expect("bus poisoned").queue.len()
    }
}

impl Transport for SimBus {
    fn register_endpoint(&self, addr: &EndpointAddr, inbox: Mailbox) -> Result<Registration, TransportError> {
        if !matches!(addr, EndpointAddr::Sim(_)) {
            return Err(TransportError::Unroutable(addr.clone()));
        }
        let mut st = self.state.lock().expect("bus poisoned");
        if st.endpoints.contains_key(addr) {
            return Err(TransportError::AddrInUse(addr.clone()));
        }
        st.endpoints.insert(addr.clone(), inbox);
        Ok(Registration { addr: addr.clone() })
    }

    fn deregister(&self, addr: &EndpointAddr) {
        self.state.lock().expect("bus poisoned").endpoints.remove(addr);
    }

    fn send(&self, env: &Envelope, to: &EndpointAddr) -> Result<DeliveryTicket, TransportError> {
        let bytes = encode_for_send(env)?;
        let mut st = self.state.lock().expect("bus poisoned");
        if !st.endpoints.contains_key(to) {
            return Err(TransportError::Unroutable(to.clone()));
        }
        let sender = env.sender.to_string();
        let counter = st.sent_by.entry(sender.clone()).or_insert(0);
        let sender_index = *counter;
        *counter += 1;
        let send_tick = st.clock;
        st.queue.push(Queued { send_tick, sender, sender_index, to: to.clone(), envelope: env.clone() });
        Ok(DeliveryTicket { bytes: bytes.len() })
    }

    fn step(&self) -> Result<Vec<BusEvent>, TransportError> {
        let mut st = self.state.lock().expect("bus poisoned");
        let mut queue = std::mem::take(&mut st.queue);
        queue.sort_by(|a, b| {
            (a.send_tick, &a.sender, a.sender_index).cmp(&(b.send_tick, &b.sender, b.sender_index))
        });
        let tick = st.clock;
        let mut events = Vec::with_capacity(queue.len());
        for q in queue {
            // An endpoint deregistered after the send was accepted: nothing to deliver to.
            let Some(inbox) = st.endpoints.get(&q.to).cloned() else { continue };
            let ev = BusEvent { seq: st.next_seq, envelope: q.envelope, delivered_at: tick };
            st.next_seq += 1;
            inbox.push(ev.clone());
            events.push(ev);
        }
        st.clock += 1;
        Ok(events)
    }
}
