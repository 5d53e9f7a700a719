//! Tool manager actor. Serves registration, lookup, invocation and workflow
//! submission for one [`ToolManager`], forwards calls for tools registered
//! below it and meters every successful call it was asked for directly.

use std::collections::BTreeMap;

use super::context::Context;
use super::manager::{Located, ToolManager};
use super::tool::{ResourceDescriptor, ToolDescriptor, ToolError};
use super::workflow::{execute_workflow, Meter, Usage, WorkflowDefinition};
use crate::a3ap::handshake::{HandshakeEvent, Handshakes};
use crate::a3ap::ledger::Ledger;
use crate::a3ap::sign::Identity;
use crate::a3ap::TrustRoots;
use crate::envelope::{Envelope, MsgId, Protocol};
use crate::id::{Principal, RegistryPath, ServiceId};
use crate::map;
use crate::transport::{Actor, ActorCtx};
use crate::value::{from_value, to_value, Map, Value};

/// `svc://tools/<path>`: the tool manager serving a registry domain.
pub fn tool_manager_principal(path: &RegistryPath) -> Principal {
    let mut segs = vec!["tools"];
    segs.extend(path.segments().iter().map(String::as_str));
    Principal::Service(ServiceId::new(&segs).expect("registry segments are valid service segments"))
}

pub fn error_payload(e: &ToolError) -> Map {
    let mut err = map! { "code" => e.code(), "detail" => e.to_string() };
    if let ToolError::ArgsSchemaMismatch { path, .. } | ToolError::OutputSchemaViolation { path, .. } = e {
        err.insert("path".into(), path.as_str().into());
    }
    map! { "ok" => false, "error" => err }
}

/// Successful `tool_result` contents as seen by a caller.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolReply {
    pub tool_id: String,
    pub output: Value,
    pub hops: usize,
    pub usage: Option<Usage>,
}

/// Reads a `tool_result` answering an invocation.
pub fn read_tool_result(env: &Envelope) -> Result<ToolReply, (String, String)> {
    if env.get("ok").and_then(Value::as_bool) != Some(true) {
        let err = env.get("error").and_then(Value::as_map);
        let field = |k: &str| err.and_then(|e| e.get(k)).and_then(Value::as_str).unwrap_or_default().to_string();
        return Err((field("code"), field("detail")));
    }
    Ok(ToolReply {
        tool_id: env.get_str("tool_id").unwrap_or_default().to_string(),
        output: env.get("output").cloned().unwrap_or_else(|| Value::Map(Map::new())),
        hops: env.get("hops").and_then(Value::as_int).unwrap_or(0) as usize,
        usage: env.get("usage").and_then(|u| from_value(u).ok()),
    })
}

struct Forwarded {
    request: Envelope,
}

pub struct ToolManagerService {
    identity: Identity,
    manager: ToolManager,
    parent: Option<Principal>,
    handshakes: Handshakes,
    ledger: Ledger,
    forwarded: BTreeMap<MsgId, Forwarded>,
    runs: u64,
}

impl ToolManagerService {
    pub fn new(identity: Identity, manager: ToolManager, roots: TrustRoots, ledger: Ledger, handshake_timeout: u64) -> Self {
        let parent = manager.path().parent().map(|p| tool_manager_principal(&p));
        Self {
            identity,
            manager,
            parent,
            handshakes: Handshakes::new(roots, handshake_timeout),
            ledger,
            forwarded: BTreeMap::new(),
            runs: 0,
        }
    }

    pub fn manager(&self) -> &ToolManager {
        &self.manager
    }

    pub fn manager_mut(&mut self) -> &mut ToolManager {
        &mut self.manager
    }

    fn sent_by_parent(&self, env: &Envelope) -> bool {
        self.parent.as_ref() == Some(&env.sender)
    }

    fn is_child(&self, p: &Principal) -> bool {
        match p {
            Principal::Service(s) => {
                let segs = s.segments();
                segs.first().map(String::as_str) == Some("tools")
                    && RegistryPath::new(segs[1..].to_vec()).is_ok_and(|child| child.parent().as_ref() == Some(self.manager.path()))
            }
            _ => false,
        }
    }

    fn meter(&self, payer: &Principal) -> Result<Meter, ToolError> {
        let s = self.handshakes.session_with(payer).ok_or_else(|| ToolError::NoSession(payer.to_string()))?;
        Ok(Meter { ledger: self.ledger.clone(), session: s.session_id, payer: payer.clone(), payee: self.identity.principal.clone() })
    }

    fn register(&mut self, ctx: &mut ActorCtx, env: &Envelope) {
        let r = (|| {
            let d: ToolDescriptor = from_value(env.get("descriptor").ok_or_else(|| ToolError::BadSchema("descriptor".into()))?)
                .map_err(|e| ToolError::BadSchema(e.to_string()))?;
            if let Some(owner) = env.get_str("owner") {
                if !self.is_child(&env.sender) {
                    return Err(ToolError::failure("unauthenticated", format!("{} is not a child manager", env.sender)));
                }
                let owner: RegistryPath = owner.parse().map_err(|_| ToolError::failure("bad_route", owner.to_string()))?;
                self.manager.announce(&owner, d.clone())?;
                Ok((d, owner))
            } else {
                if d.provider != env.sender {
                    return Err(ToolError::failure("unauthenticated", format!("{} is not the provider", env.sender)));
                }
                self.manager.register_tool(d.clone())?;
                Ok((d, self.manager.path().clone()))
            }
        })();
        match r {
            Ok((d, owner)) => {
                self.identity.reply(ctx, env, "tool_result", map! { "ok" => true, "tool_id" => d.tool_id.as_str() });
                if let Some(parent) = &self.parent {
                    let payload = map! {
                        "descriptor" => to_value(&d).expect("descriptor encodes"),
                        "owner" => owner.to_string(),
                    };
                    self.identity.request(ctx, Protocol::Atp, "tool_register", parent, payload);
                }
            }
            Err(e) => {
                self.identity.reply(ctx, env, "tool_result", error_payload(&e));
            }
        }
    }

    fn lookup(&self, ctx: &mut ActorCtx, env: &Envelope) {
        let here = self.manager.path().segments().len();
        let payload = if let Some(id) = env.get_str("tool_id") {
            match self.manager.locate(id) {
                Some(l) => {
                    let hops = match &l {
                        Located::Local(_) => 0,
                        Located::Below { owner, .. } => owner.segments().len() - here,
                    };
                    map! { "ok" => true, "tools" => vec![to_value(l.descriptor()).expect("descriptor encodes")], "hops" => hops as i64 }
                }
                None => error_payload(&ToolError::UnknownTool(id.to_string())),
            }
        } else if let Some(tag) = env.get_str("tag") {
            let found: Vec<Value> = self.manager.find_by_tag(tag).into_iter().map(|d| to_value(d).expect("descriptor encodes")).collect();
            map! { "ok" => true, "tools" => found }
        } else {
            error_payload(&ToolError::failure("bad_request", "tool_id or tag required"))
        };
        self.identity.reply(ctx, env, "tool_result", payload);
    }

    fn invoke(&mut self, ctx: &mut ActorCtx, env: &Envelope) {
        let tool_id = env.get_str("tool_id").unwrap_or_default().to_string();
        let args = env.get("args").cloned().unwrap_or(Value::Map(Map::new()));
        let direct = !self.sent_by_parent(env);
        if direct {
            if let Err(e) = self.meter(&env.sender) {
                self.identity.reply(ctx, env, "tool_result", error_payload(&e));
                return;
            }
        }
        let child = match self.manager.locate(&tool_id) {
            Some(Located::Below { child, .. }) => Some(child.to_string()),
            _ => None,
        };
        if let Some(child) = child {
            let next = tool_manager_principal(&self.manager.path().child(&child).expect("announced child is valid"));
            let fwd = self.identity.request(ctx, Protocol::Atp, "tool_invoke", &next, map! { "tool_id" => tool_id.as_str(), "args" => args });
            self.forwarded.insert(fwd, Forwarded { request: env.clone() });
            return;
        }
        let payload = match self.manager.invoke_local(&tool_id, &args) {
            Ok(inv) => self.success(ctx, env, &tool_id, inv.output, inv.cost_tokens, 0),
            Err(e) => {
                ctx.info(format!("{tool_id} for {} failed: {e}", env.sender));
                error_payload(&e)
            }
        };
        self.identity.reply(ctx, env, "tool_result", payload);
    }

    fn success(&self, ctx: &mut ActorCtx, req: &Envelope, tool_id: &str, output: Value, cost: u64, hops: usize) -> Map {
        let mut payload = map! {
            "ok" => true,
            "tool_id" => tool_id,
            "output" => output,
            "cost_tokens" => cost as i64,
            "hops" => hops as i64,
        };
        if !self.sent_by_parent(req) {
            match self.meter(&req.sender).and_then(|m| m.charge(cost, ctx.now()).map_err(|e| ToolError::failure("metering", e.to_string()))) {
                Ok(usage) => {
                    payload.insert("usage".into(), to_value(&usage).expect("usage encodes"));
                }
                Err(e) => return error_payload(&e),
            }
        }
        payload
    }

    fn relay(&mut self, ctx: &mut ActorCtx, env: &Envelope) {
        let Some(Forwarded { request }) = env.correlation_id.and_then(|c| self.forwarded.remove(&c)) else {
            if env.get("ok").and_then(Value::as_bool) == Some(false) {
                ctx.info(format!("{} reported {}", env.sender, env.get("error").map(|e| e.to_string()).unwrap_or_default()));
            }
            return;
        };
        let payload = match read_tool_result(env) {
            Ok(reply) => {
                let cost = env.get("cost_tokens").and_then(Value::as_int).unwrap_or(0) as u64;
                self.success(ctx, &request, &reply.tool_id, reply.output, cost, reply.hops + 1)
            }
            Err(_) => env.payload.clone(),
        };
        self.identity.reply(ctx, &request, "tool_result", payload);
    }

    fn attach(&mut self, ctx: &mut ActorCtx, env: &Envelope) {
        let r = env
            .get("resource")
            .ok_or_else(|| ToolError::BadSchema("resource".into()))
            .and_then(|v| from_value::<ResourceDescriptor>(v).map_err(|e| ToolError::BadSchema(e.to_string())))
            .and_then(|r| self.manager.attach_resource(r));
        let payload = match r {
            Ok(id) => map! { "ok" => true, "resource_id" => id },
            Err(e) => error_payload(&e),
        };
        self.identity.reply(ctx, env, "tool_result", payload);
    }

    fn submit(&mut self, ctx: &mut ActorCtx, env: &Envelope) {
        let meter = match self.meter(&env.sender) {
            Ok(m) => m,
            Err(e) => {
                self.identity.reply(ctx, env, "workflow_status", error_payload(&e));
                return;
            }
        };
        let def: WorkflowDefinition = match env.get("definition").map(from_value) {
            Some(Ok(d)) => d,
            _ => {
                self.identity.reply(ctx, env, "workflow_status", error_payload(&ToolError::BadSchema("definition".into())));
                return;
            }
        };
        self.runs += 1;
        let scope = env.get_str("scope").unwrap_or_default();
        let mut context = Context::new(&format!("{}/ctx", def.workflow_id), scope);
        if let Some(seed) = env.get("context").and_then(Value::as_map) {
            for (k, v) in seed {
                context.seed(k, v.clone());
            }
        }
        let mut clock = ctx.now();
        let run_id = format!("{}#{}", def.workflow_id, self.runs);
        let run = execute_workflow(&def, &mut context, &mut self.manager, Some(&meter), &mut clock, &run_id);
        let payload = map! {
            "ok" => true,
            "run" => to_value(&run).expect("run encodes"),
            "context" => to_value(&context).expect("context encodes"),
        };
        self.identity.reply(ctx, env, "workflow_status", payload);
    }
}

impl Actor for ToolManagerService {
    fn principal(&self) -> Principal {
        self.identity.principal.clone()
    }

    fn on_message(&mut self, env: Envelope, ctx: &mut ActorCtx) {
        match (env.protocol, env.msg_type.as_str()) {
            (Protocol::A3ap, _) => match self.handshakes.handle(&self.identity, &env, ctx) {
                Some(HandshakeEvent::Established(s)) => self.ledger.open_session(&s),
                Some(HandshakeEvent::Failed { peer, error }) => ctx.info(format!("handshake with {peer} failed: {error}")),
                None => {}
            },
            (Protocol::Atp, "tool_register") => self.register(ctx, &env),
            (Protocol::Atp, "tool_lookup") => self.lookup(ctx, &env),
            (Protocol::Atp, "tool_invoke") => self.invoke(ctx, &env),
            (Protocol::Atp, "tool_result") => self.relay(ctx, &env),
            (Protocol::Atp, "resource_attach") => self.attach(ctx, &env),
            (Protocol::Atp, "workflow_submit") => self.submit(ctx, &env),
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
