//! Sans-IO actor runtime. Protocol logic lives in [`Actor`] implementations
//! that react to envelopes and queue outgoing ones on an [`ActorCtx`]; the
//! same actors run unchanged on the sim bus ([`SimNetwork`]) or over sockets
//! ([`LiveNetwork`]).

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::socket::unix_ms;
use super::{BusEvent, EndpointAddr, Mailbox, SimBus, SocketTransport, Transport, TransportError};
use crate::a3ap::sign::KeyRing;
use crate::envelope::{Envelope, IdSource, MsgId};
use crate::id::Principal;

/// Structured observations an actor records alongside its messages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "note", rename_all = "snake_case")]
pub enum Note {
    /// Scenario phase marker, 1..=7.
    Phase { phase: u8 },
    /// A task state machine moved from `from` to `to`.
    Transition {
        task: String,
        from: String,
        to: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cause: Option<MsgId>,
    },
    /// An inbound envelope was refused before reaching protocol logic.
    Rejected { msg_id: MsgId, reason: String },
    Info { text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub at: u64,
    pub actor: Principal,
    #[serde(flatten)]
    pub note: Note,
}

/// What an actor sees while handling one event.
pub struct ActorCtx<'a> {
    now: u64,
    ids: &'a mut IdSource,
    outbox: Vec<Envelope>,
    notes: Vec<Note>,
}

impl<'a> ActorCtx<'a> {
    pub fn new(now: u64, ids: &'a mut IdSource) -> Self {
        Self { now, ids, outbox: Vec::new(), notes: Vec::new() }
    }

    /// Logical tick in simulation, Unix milliseconds live.
    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn fresh_id(&mut self) -> MsgId {
        self.ids.msg_id()
    }

    pub fn random32(&mut self) -> [u8; 32] {
        self.ids.bytes32()
    }

    pub fn send(&mut self, env: Envelope) {
        self.outbox.push(env);
    }

    pub fn note(&mut self, note: Note) {
        self.notes.push(note);
    }

    pub fn info(&mut self, text: impl Into<String>) {
        self.notes.push(Note::Info { text: text.into() });
    }

    pub fn take_outbox(&mut self) -> Vec<Envelope> {
        std::mem::take(&mut self.outbox)
    }

    pub fn take_notes(&mut self) -> Vec<Note> {
        std::mem::take(&mut self.notes)
    }
}

pub trait Actor: Any + Send {
    fn principal(&self) -> Principal;

    fn on_start(&mut self, _ctx: &mut ActorCtx) {}

    fn on_message(&mut self, env: Envelope, ctx: &mut ActorCtx);

    /// Called once per sim step and periodically live; used for timeouts.
    fn on_tick(&mut self, _ctx: &mut ActorCtx) {}
}

fn downcast<T: Actor>(a: &dyn Actor) -> Option<&T> {
    (a as &dyn Any).downcast_ref::<T>()
}

fn downcast_mut<T: Actor>(a: &mut dyn Actor) -> Option<&mut T> {
    (a as &mut dyn Any).downcast_mut::<T>()
}

/// Checks an inbound envelope against the key ring, if one is configured.
fn admit(keys: Option<&KeyRing>, env: &Envelope) -> Result<(), String> {
    match keys {
        Some(k) => k.verify(env).map_err(|e| e.to_string()),
        None => Ok(()),
    }
}

/// Deterministic single-threaded network over a [`SimBus`].
pub struct SimNetwork {
    bus: SimBus,
    ids: IdSource,
    actors: BTreeMap<Principal, Box<dyn Actor>>,
    keys: Option<KeyRing>,
    events: Vec<BusEvent>,
    log: Vec<LogEntry>,
    started: BTreeSet<Principal>,
    steps: u64,
}

impl SimNetwork {
    pub fn new(seed: u64) -> Self {
        Self {
            bus: SimBus::new(),
            ids: IdSource::seeded(seed),
            actors: BTreeMap::new(),
            keys: None,
            events: Vec::new(),
            log: Vec::new(),
            started: BTreeSet::new(),
            steps: 0,
        }
    }

    /// Verifies every delivered envelope against `keys` before dispatch.
    pub fn with_keyring(mut self, keys: KeyRing) -> Self {
        self.keys = Some(keys);
        self
    }

    pub fn add(&mut self, actor: impl Actor) -> Result<(), TransportError> {
        let p = actor.principal();
        self.bus.register_endpoint(&EndpointAddr::sim(&p), Mailbox::new())?;
        self.actors.insert(p, Box::new(actor));
        Ok(())
    }

    pub fn remove(&mut self, p: &Principal) -> Option<Box<dyn Actor>> {
        self.bus.deregister(&EndpointAddr::sim(p));
        self.started.remove(p);
        self.actors.remove(p)
    }

    pub fn actor<T: Actor>(&self, p: &Principal) -> Option<&T> {
        self.actors.get(p).and_then(|a| downcast(a.as_ref()))
    }

    pub fn actor_mut<T: Actor>(&mut self, p: &Principal) -> Option<&mut T> {
        self.actors.get_mut(p).and_then(|a| downcast_mut(a.as_mut()))
    }

    pub fn clock(&self) -> u64 {
        self.bus.clock()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn events(&self) -> &[BusEvent] {
        &self.events
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn is_quiescent(&self) -> bool {
        self.bus.queued() == 0
    }

    /// Runs `f` against one actor with a context, then routes its output.
    /// Lets a driver inject work (e.g. a user request) between steps.
    pub fn with_actor(&mut self, p: &Principal, f: impl FnOnce(&mut dyn Actor, &mut ActorCtx)) {
        let now = self.bus.clock();
        let Some(actor) = self.actors.get_mut(p) else { return };
        let mut ctx = ActorCtx::new(now, &mut self.ids);
        f(actor.as_mut(), &mut ctx);
        let (out, notes) = (ctx.take_outbox(), ctx.take_notes());
        self.flush(p.clone(), now, out, notes);
    }

    fn flush(&mut self, who: Principal, at: u64, out: Vec<Envelope>, notes: Vec<Note>) {
        for note in notes {
            self.log.push(LogEntry { at, actor: who.clone(), note });
        }
        for env in out {
            if let Err(e) = self.bus.send(&env, &EndpointAddr::sim(&env.recipient)) {
                self.log.push(LogEntry {
                    at,
                    actor: who.clone(),
                    note: Note::Info { text: format!("send of {} to {} failed: {e}", env.msg_type, env.recipient) },
                });
            }
        }
    }

    /// Runs `on_start` for every actor that has not started yet, including
    /// ones added after the first step.
    fn start(&mut self) {
        let principals: Vec<_> = self.actors.keys().filter(|p| !self.started.contains(*p)).cloned().collect();
        for p in principals {
            self.started.insert(p.clone());
            self.with_actor(&p, |a, ctx| a.on_start(ctx));
        }
    }

    /// Delivers one bus step, dispatches each event in sequence order, then
    /// ticks every actor.
    pub fn step(&mut self) {
        self.start();
        let delivered = self.bus.step().expect("sim bus steps");
        self.steps += 1;
        let now = self.bus.clock();
        for ev in delivered {
            self.events.push(ev.clone());
            let to = ev.envelope.recipient.clone();
            if let Err(reason) = admit(self.keys.as_ref(), &ev.envelope) {
                let msg_id = ev.envelope.msg_id;
                self.log.push(LogEntry { at: now, actor: to, note: Note::Rejected { msg_id, reason } });
                continue;
            }
            let Some(actor) = self.actors.get_mut(&to) else { continue };
            let mut ctx = ActorCtx::new(now, &mut self.ids);
            actor.on_message(ev.envelope, &mut ctx);
            let (out, notes) = (ctx.take_outbox(), ctx.take_notes());
            self.flush(to, now, out, notes);
        }
        let principals: Vec<_> = self.actors.keys().cloned().collect();
        for p in principals {
            self.with_actor(&p, |a, ctx| a.on_tick(ctx));
        }
    }

    /// Steps until `done` holds or `max_steps` more steps have run.
    /// Returns whether `done` held.
    pub fn run_until(&mut self, max_steps: u64, mut done: impl FnMut(&SimNetwork) -> bool) -> bool {
        self.start();
        for _ in 0..max_steps {
            if done(self) {
                return true;
            }
            self.step();
        }
        done(self)
    }

    /// Steps until no message is in flight (at least one step).
    pub fn run_to_quiescence(&mut self, max_steps: u64) -> bool {
        self.step();
        self.run_until(max_steps, |n| n.is_quiescent())
    }
}

type Directory = Arc<RwLock<BTreeMap<Principal, EndpointAddr>>>;

struct Running {
    stop: Arc<AtomicBool>,
    handle: JoinHandle<Box<dyn Actor>>,
}

/// Threaded network over TCP: one thread and one listening socket per actor.
pub struct LiveNetwork {
    transport: SocketTransport,
    directory: Directory,
    keys: Option<KeyRing>,
    log: Arc<Mutex<Vec<LogEntry>>>,
    events: Arc<Mutex<Vec<BusEvent>>>,
    pending: Vec<(Box<dyn Actor>, Mailbox)>,
    running: BTreeMap<Principal, Running>,
    tick: Duration,
}

impl Default for LiveNetwork {
    fn default() -> Self {
        Self::new()
    }
}

impl LiveNetwork {
    pub fn new() -> Self {
        Self {
            transport: SocketTransport::new(),
            directory: Arc::default(),
            keys: None,
            log: Arc::default(),
            events: Arc::default(),
            pending: Vec::new(),
            running: BTreeMap::new(),
            tick: Duration::from_millis(10),
        }
    }

    pub fn with_keyring(mut self, keys: KeyRing) -> Self {
        self.keys = Some(keys);
        self
    }

    /// Records where a principal hosted by another process listens.
    pub fn add_peer(&self, p: Principal, addr: EndpointAddr) {
        self.directory.write().expect("directory poisoned").insert(p, addr);
    }

    pub fn directory(&self) -> BTreeMap<Principal, EndpointAddr> {
        self.directory.read().expect("directory poisoned").clone()
    }

    /// Binds a listener for the actor (`listen` may use port 0) and returns
    /// the bound address. The actor starts on [`LiveNetwork::start`].
    pub fn add(&mut self, actor: impl Actor, listen: &EndpointAddr) -> Result<EndpointAddr, TransportError> {
        let inbox = Mailbox::new();
        let reg = self.transport.register_endpoint(listen, inbox.clone())?;
        self.add_peer(actor.principal(), reg.addr.clone());
        self.pending.push((Box::new(actor), inbox));
        Ok(reg.addr)
    }

    /// Spawns one thread per added actor.
    pub fn start(&mut self) {
        for (mut actor, inbox) in std::mem::take(&mut self.pending) {
            let p = actor.principal();
            let stop = Arc::new(AtomicBool::new(false));
            let (transport, dir, keys, log, events, tick, stop2) = (
                self.transport.clone(),
                self.directory.clone(),
                self.keys.clone(),
                self.log.clone(),
                self.events.clone(),
                self.tick,
                stop.clone(),
            );
            let handle = thread::spawn(move || {
                let mut ids = IdSource::random();
                let me = actor.principal();
                let flush = |ctx: &mut ActorCtx| {
                    let at = ctx.now();
                    let mut entries = log.lock().expect("log poisoned");
                    for note in ctx.take_notes() {
                        entries.push(LogEntry { at, actor: me.clone(), note });
                    }
                    drop(entries);
                    for env in ctx.take_outbox() {
                        let addr = dir.read().expect("directory poisoned").get(&env.recipient).cloned();
                        let result = match addr {
                            Some(a) => transport.send(&env, &a).map(|_| ()),
                            None => Err(TransportError::Unroutable(EndpointAddr::sim(&env.recipient))),
                        };
                        if let Err(e) = result {
                            log.lock().expect("log poisoned").push(LogEntry {
                                at,
                                actor: me.clone(),
                                note: Note::Info { text: format!("send of {} failed: {e}", env.msg_type) },
                            });
                        }
                    }
                };
                let mut ctx = ActorCtx::new(unix_ms(), &mut ids);
                actor.on_start(&mut ctx);
                flush(&mut ctx);
                let mut last_tick = Instant::now();
                while !stop2.load(Ordering::Relaxed) {
                    if let Some(ev) = inbox.pop_timeout(tick) {
                        events.lock().expect("event log poisoned").push(ev.clone());
                        let mut ctx = ActorCtx::new(unix_ms(), &mut ids);
                        match admit(keys.as_ref(), &ev.envelope) {
                            Ok(()) => actor.on_message(ev.envelope, &mut ctx),
                            Err(reason) => ctx.note(Note::Rejected { msg_id: ev.envelope.msg_id, reason }),
                        }
                        flush(&mut ctx);
                    }
                    if last_tick.elapsed() >= tick {
                        last_tick = Instant::now();
                        let mut ctx = ActorCtx::new(unix_ms(), &mut ids);
                        actor.on_tick(&mut ctx);
                        flush(&mut ctx);
                    }
                }
                actor
            });
            self.running.insert(p, Running { stop, handle });
        }
    }

    pub fn log(&self) -> Vec<LogEntry> {
        self.log.lock().expect("log poisoned").clone()
    }

    /// Delivered envelopes in local delivery order.
    pub fn events(&self) -> Vec<BusEvent> {
        let mut evs = self.events.lock().expect("event log poisoned").clone();
        evs.sort_by_key(|e| e.seq);
        evs
    }

    /// Polls the shared log until `done` holds or `timeout` elapses.
    pub fn wait_until(&self, timeout: Duration, mut done: impl FnMut(&[LogEntry]) -> bool) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if done(&self.log.lock().expect("log poisoned")) {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(5));
        }
    }

    /// Stops every actor thread and hands the actors back for inspection.
    pub fn shutdown(&mut self) -> BTreeMap<Principal, Box<dyn Actor>> {
        for r in self.running.values() {
            r.stop.store(true, Ordering::Relaxed);
        }
        let mut out = BTreeMap::new();
        for (p, r) in std::mem::take(&mut self.running) {
            if let Ok(actor) = r.handle.join() {
                out.insert(p, actor);
            }
        }
        for addr in self.directory().values() {
            self.transport.deregister(addr);
        }
        out
    }
}

impl Drop for LiveNetwork {
    fn drop(&mut self) {
        for r in self.running.values() {
            r.stop.store(true, Ordering::Relaxed);
        }
    }
}

/// Downcasts an actor returned by [`LiveNetwork::shutdown`].
pub fn actor_ref<T: Actor>(a: &dyn Actor) -> Option<&T> {
    downcast(a)
}
