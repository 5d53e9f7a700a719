//! Registry server actor: serves ARP requests for one [`RegistryNode`],
//! forwards resolutions through the tree and pushes capability events to
//! subscribed discovery services.

use std::collections::BTreeSet;

use super::node::{payload_of, ArpError, CapabilityChange, RegisterOutcome, RegistrationResult, RegistryNode, Route};
use crate::a3ap::handshake::{HandshakeEvent, Handshakes};
use crate::a3ap::sign::Identity;
use crate::envelope::{Envelope, MsgId, Protocol};
use crate::id::{AgentId, Principal};
use crate::map;
use crate::transport::{Actor, ActorCtx};
use crate::value::{to_value, Map, Value};

/// Payload carried by `capability_event` and inside `sync_snapshot`.
pub fn change_payload(registry: &Principal, change: &CapabilityChange, anchor_seq: u64) -> Map {
    let mut m = payload_of(change);
    m.insert("registry".into(), registry.to_string().into());
    m.insert("anchor_seq".into(), Value::Int(anchor_seq as i64));
    m
}

fn error_payload(e: &ArpError) -> Value {
    let mut m = map! { "code" => e.code(), "detail" => e.to_string() };
    if let ArpError::DescriptorInvalid(report) = e {
        m.insert("report".into(), to_value(report).expect("report encodes"));
    }
    Value::Map(m)
}

fn result_payload(r: &Result<RegistrationResult, ArpError>) -> Map {
    match r {
        Ok(ok) => map! {
            "ok" => true,
            "agent" => ok.agent.to_string(),
            "version" => ok.version as i64,
            "anchor_seq" => ok.anchor.seq as i64,
            "anchor_head" => ok.anchor.head.clone(),
        },
        Err(e) => map! { "ok" => false, "error" => error_payload(e) },
    }
}

pub struct RegistryService {
    identity: Identity,
    node: RegistryNode,
    subscribers: BTreeSet<Principal>,
    handshakes: Handshakes,
}

impl RegistryService {
    pub fn new(identity: Identity, node: RegistryNode, handshake_timeout: u64) -> Self {
        let roots = node.trust_roots().clone();
        Self { identity, node, subscribers: BTreeSet::new(), handshakes: Handshakes::new(roots, handshake_timeout) }
    }

    pub fn node(&self) -> &RegistryNode {
        &self.node
    }

    pub fn handshakes(&self) -> &Handshakes {
        &self.handshakes
    }

    pub fn subscribe(&mut self, p: Principal) {
        self.subscribers.insert(p);
    }

    fn publish(&self, ctx: &mut ActorCtx, change: &CapabilityChange, anchor_seq: u64) {
        let payload = change_payload(&self.identity.principal, change, anchor_seq);
        for sub in &self.subscribers {
            self.identity.notice(ctx, Protocol::Arp, "capability_event", sub, None, payload.clone());
        }
    }

    fn finish(&self, ctx: &mut ActorCtx, req: &Envelope, r: Result<RegistrationResult, ArpError>, phases: Option<Vec<Value>>) {
        let mut payload = result_payload(&r);
        if let Some(p) = phases {
            payload.insert("phases".into(), Value::List(p));
        }
        self.identity.reply(ctx, req, "register_result", payload);
        match r {
            Ok(ok) => {
                ctx.info(format!("{} {} anchored at {}", req.msg_type, ok.agent, ok.anchor.seq));
                self.publish(ctx, &ok.change, ok.anchor.seq);
            }
            Err(e) => ctx.info(format!("{} from {} refused: {e}", req.msg_type, req.sender)),
        }
    }

    fn resolve(&self, ctx: &mut ActorCtx, env: &Envelope) {
        let origin: Principal = env.get_str("origin").and_then(|s| s.parse().ok()).unwrap_or_else(|| env.sender.clone());
        let origin_msg: MsgId = env.get_str("origin_msg").and_then(|s| s.parse().ok()).unwrap_or(env.msg_id);
        let hops = env.get("hops").and_then(Value::as_int).unwrap_or(0);
        let agent = match env.get_str("agent").map(crate::id::parse_agent_id) {
            Some(Ok(a)) => a,
            _ => {
                let e = ArpError::Malformed("agent".into());
                return self.answer(ctx, &origin, origin_msg, map! { "ok" => false, "hops" => hops, "error" => error_payload(&e) });
            }
        };
        let outcome = self.node.route(&agent).and_then(|route| match route {
            Route::Local => self.node.resolve_local(&agent).map(|r| Some(to_value(r).expect("record encodes"))),
            Route::Child(next) | Route::Parent(next) => {
                self.forward(ctx, &next.into(), &agent, &origin, origin_msg, hops + 1);
                Ok(None)
            }
        });
        match outcome {
            Ok(None) => {}
            Ok(Some(record)) => self.answer(
                ctx,
                &origin,
                origin_msg,
                map! {
                    "ok" => true,
                    "hops" => hops,
                    "resolved_by" => self.identity.principal.to_string(),
                    "record" => record,
                },
            ),
            Err(e) => self.answer(ctx, &origin, origin_msg, map! { "ok" => false, "hops" => hops, "error" => error_payload(&e) }),
        }
    }

    fn forward(&self, ctx: &mut ActorCtx, next: &Principal, agent: &AgentId, origin: &Principal, origin_msg: MsgId, hops: i64) {
        let payload = map! {
            "agent" => agent.to_string(),
            "origin" => origin.to_string(),
            "origin_msg" => origin_msg.to_string(),
            "hops" => hops,
        };
        self.identity.request(ctx, Protocol::Arp, "resolve_request", next, payload);
    }

    fn answer(&self, ctx: &mut ActorCtx, origin: &Principal, origin_msg: MsgId, payload: Map) {
        self.identity.notice(ctx, Protocol::Arp, "resolve_result", origin, Some(origin_msg), payload);
    }

    fn sync(&mut self, ctx: &mut ActorCtx, req: &Envelope) {
        self.subscribers.insert(req.sender.clone());
        let changes: Vec<Value> = self
            .node
            .active_records()
            .map(|r| {
                let change = CapabilityChange::Upsert { descriptor: r.descriptor.clone() };
                Value::Map(change_payload(&self.identity.principal, &change, r.anchor_seq))
            })
            .collect();
        let payload = map! { "registry" => self.identity.principal.to_string(), "changes" => changes };
        self.identity.reply(ctx, req, "sync_snapshot", payload);
    }
}

impl Actor for RegistryService {
    fn principal(&self) -> Principal {
        self.identity.principal.clone()
    }

    fn on_message(&mut self, env: Envelope, ctx: &mut ActorCtx) {
        let now = ctx.now();
        match (env.protocol, env.msg_type.as_str()) {
            (Protocol::A3ap, _) => match self.handshakes.handle(&self.identity, &env, ctx) {
                Some(HandshakeEvent::Established(s)) => ctx.info(format!("session {} with {}", s.session_id, s.other(&self.identity.principal))),
                Some(HandshakeEvent::Failed { peer, error }) => ctx.info(format!("handshake with {peer} failed: {error}")),
                None => {}
            },
            (Protocol::Arp, "register_request") => {
                let RegisterOutcome { phases, result } = self.node.register(&env, now);
                let trace = phases
                    .iter()
                    .map(|(p, ok)| Value::Map(map! { "phase" => p.as_str(), "ok" => *ok }))
                    .collect();
                self.finish(ctx, &env, result, Some(trace));
            }
            (Protocol::Arp, "update_request") => {
                let r = self.node.update_capabilities(&env, now);
                self.finish(ctx, &env, r, None);
            }
            (Protocol::Arp, "deregister_request") => {
                let r = self.node.deregister(&env, now);
                self.finish(ctx, &env, r, None);
            }
            (Protocol::Arp, "resolve_request") => self.resolve(ctx, &env),
            (Protocol::Adp, "sync_request") => self.sync(ctx, &env),
            _ => ctx.info(format!("ignored {} {}", env.protocol, env.msg_type)),
        }
    }

    fn on_tick(&mut self, ctx: &mut ActorCtx) {
        for ev in self.handshakes.poll_timeouts(ctx.now()) {
            if let HandshakeEvent::Failed { peer, error } = ev {
                ctx.info(format!("handshake with {peer} failed: {error}"));
            }
        }
    }
}
