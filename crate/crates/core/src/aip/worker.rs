//! Scripted worker agents. A worker registers, joins groups, accepts
//! assignments and, once told to start, walks a table of steps: tool calls
//! through its tool manager, local ranking, negotiation with the leader,
//! and finally a result.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::task::NegotiationKind;
use super::{map_field, opt_str, str_field};
use crate::a3ap::handshake::{HandshakeEvent, Handshakes};
use crate::a3ap::sign::Identity;
use crate::a3ap::TrustRoots;
use crate::arp::send_register;
use crate::atp::read_tool_result;
use crate::descriptor::CapabilityDescriptor;
use crate::envelope::{Envelope, MsgId, Protocol};
use crate::id::Principal;
use crate::map;
use crate::transport::{Actor, ActorCtx};
use crate::value::{canonical_encode, Map, Value};

/// A step condition: holds when the value at `path` equals `equals`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cond {
    pub path: String,
    pub equals: Value,
}

fn three() -> usize {
    3
}

/// One scripted action. String arguments starting with `$` are paths into
/// the job's scratch space (`params`, `inputs` and every saved output);
/// `$$` escapes a literal dollar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "do", rename_all = "snake_case")]
pub enum Step {
    /// Invokes a tool and saves its output.
    Call {
        tool: String,
        #[serde(default)]
        args: Map,
        save: String,
    },
    /// Sorts a list of records by a numeric field, highest first, and keeps the top ones.
    Rank {
        from: String,
        by: String,
        #[serde(default = "three")]
        top: usize,
        save: String,
    },
    /// Opens a negotiation thread with the leader and waits for it to close.
    /// Accepted params are merged into `params`.
    Ask {
        kind: NegotiationKind,
        topic: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        when: Option<Cond>,
        #[serde(default)]
        params: Map,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        options: Option<Value>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        note: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        save: Option<String>,
    },
    /// Gives the sub-task up with a `reject` when the list at `from` is empty.
    RejectIfEmpty { from: String, reason: String },
    /// Sends the result.
    Finish {
        #[serde(default)]
        output: Map,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WorkerScript {
    #[serde(default)]
    pub decline_invites: bool,
    /// Number of assignments to reject before accepting any.
    #[serde(default)]
    pub reject_assignments: u32,
    #[serde(default)]
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq)]
enum Wait {
    Start,
    Session,
    Tool(MsgId),
    Thread(String),
    Done,
}

#[derive(Debug, Clone)]
struct Job {
    task_id: String,
    subtask_id: String,
    leader: Principal,
    scratch: Map,
    pc: usize,
    threads: u32,
    wait: Wait,
}

/// Reads `a.b.0.c` out of nested maps and lists.
pub fn lookup<'a>(root: &'a Map, path: &str) -> Option<&'a Value> {
    let mut parts = path.split('.');
    let mut cur = root.get(parts.next()?)?;
    for p in parts {
        cur = match cur {
            Value::Map(m) => m.get(p)?,
            Value::List(l) => l.get(p.parse::<usize>().ok()?)?,
            _ => return None,
        };
    }
    Some(cur)
}

/// Replaces `$path` strings by what they point at, recursively.
pub fn resolve(v: &Value, scratch: &Map) -> Result<Value, String> {
    match v {
        Value::Str(s) if s.starts_with("$$") => Ok(Value::Str(s[1..].to_string())),
        Value::Str(s) if s.starts_with('$') => {
            lookup(scratch, &s[1..]).cloned().ok_or_else(|| format!("nothing at {}", &s[1..]))
        }
        Value::Map(m) => Ok(Value::Map(resolve_map(m, scratch)?)),
        Value::List(l) => l.iter().map(|x| resolve(x, scratch)).collect::<Result<Vec<_>, _>>().map(Value::List),
        other => Ok(other.clone()),
    }
}

fn resolve_map(m: &Map, scratch: &Map) -> Result<Map, String> {
    m.iter().map(|(k, v)| Ok((k.clone(), resolve(v, scratch)?))).collect()
}

fn number(v: Option<&Value>) -> f64 {
    match v {
        Some(Value::Int(i)) => *i as f64,
        Some(Value::Float(f)) => *f,
        _ => f64::NEG_INFINITY,
    }
}

/// Highest `by` first; ties keep canonical-encoding order.
pub fn rank(items: &[Value], by: &str, top: usize) -> Vec<Value> {
    let mut v: Vec<&Value> = items.iter().collect();
    v.sort_by(|a, b| {
        let (x, y) = (number(a.as_map().and_then(|m| m.get(by))), number(b.as_map().and_then(|m| m.get(by))));
        y.total_cmp(&x).then_with(|| canonical_encode(a).ok().cmp(&canonical_encode(b).ok()))
    });
    v.into_iter().take(top).cloned().collect()
}

pub struct WorkerAgent {
    identity: Identity,
    handshakes: Handshakes,
    descriptor: Option<CapabilityDescriptor>,
    tool_manager: Option<Principal>,
    script: WorkerScript,
    assignments: u32,
    jobs: BTreeMap<(String, String), Job>,
    calls: BTreeMap<MsgId, (String, String)>,
    registered: Option<Result<u64, String>>,
}

impl WorkerAgent {
    pub fn new(identity: Identity, script: WorkerScript, roots: TrustRoots, handshake_timeout: u64) -> Self {
        Self {
            identity,
            handshakes: Handshakes::new(roots, handshake_timeout),
            descriptor: None,
            tool_manager: None,
            script,
            assignments: 0,
            jobs: BTreeMap::new(),
            calls: BTreeMap::new(),
            registered: None,
        }
    }

    /// Registers `d` with the agent's registry on start.
    pub fn registering(mut self, d: CapabilityDescriptor) -> Self {
        self.descriptor = Some(d);
        self
    }

    /// Authenticates with `tm` on start and sends tool calls there.
    pub fn using_tools(mut self, tm: Principal) -> Self {
        self.tool_manager = Some(tm);
        self
    }

    /// Anchor sequence number of the registration, or why it failed.
    pub fn registration(&self) -> Option<&Result<u64, String>> {
        self.registered.as_ref()
    }

    pub fn busy(&self) -> bool {
        self.jobs.values().any(|j| j.wait != Wait::Done)
    }

    fn key(env: &Envelope) -> Result<(String, String), String> {
        Ok((str_field(env, "task_id")?.to_string(), str_field(env, "subtask_id")?.to_string()))
    }

    fn has_session(&self) -> bool {
        self.tool_manager.as_ref().is_some_and(|tm| self.handshakes.session_with(tm).is_some())
    }

    fn on_assign(&mut self, ctx: &mut ActorCtx, env: &Envelope) {
        let key = match Self::key(env) {
            Ok(k) => k,
            Err(e) => return ctx.info(format!("bad assignment: {e}")),
        };
        self.assignments += 1;
        if self.assignments <= self.script.reject_assignments {
            let payload = map! { "task_id" => key.0.as_str(), "subtask_id" => key.1.as_str(), "reason" => "busy" };
            self.identity.reply(ctx, env, "subtask_reject", payload);
            return;
        }
        let scratch = map! {
            "task_id" => key.0.as_str(),
            "subtask_id" => key.1.as_str(),
            "params" => map_field(env, "params"),
            "inputs" => Map::new(),
        };
        let job = Job {
            task_id: key.0.clone(),
            subtask_id: key.1.clone(),
            leader: env.sender.clone(),
            scratch,
            pc: 0,
            threads: 0,
            wait: Wait::Start,
        };
        self.jobs.insert(key.clone(), job);
        self.identity.reply(ctx, env, "subtask_accept", map! { "task_id" => key.0, "subtask_id" => key.1 });
    }

    fn on_start_msg(&mut self, ctx: &mut ActorCtx, env: &Envelope) {
        let Ok(key) = Self::key(env) else { return };
        let Some(job) = self.jobs.get_mut(&key) else {
            return ctx.info(format!("start for unknown sub-task {}", key.1));
        };
        if job.wait != Wait::Start || env.sender != job.leader {
            return ctx.info(format!("unexpected start for {}", key.1));
        }
        job.scratch.insert("params".into(), Value::Map(map_field(env, "params")));
        job.scratch.insert("inputs".into(), Value::Map(map_field(env, "inputs")));
        self.run(ctx, &key);
    }

    fn negotiate(&self, ctx: &mut ActorCtx, job: &Job, thread_id: &str, kind: NegotiationKind, mut extra: Map) {
        extra.insert("task_id".into(), job.task_id.as_str().into());
        extra.insert("subtask_id".into(), job.subtask_id.as_str().into());
        extra.insert("thread_id".into(), thread_id.into());
        extra.insert("kind".into(), kind.as_str().into());
        self.identity.notice(ctx, Protocol::Aip, "negotiate", &job.leader, None, extra);
    }

    fn finish(&self, ctx: &mut ActorCtx, job: &mut Job, outcome: Result<Map, (String, String)>) {
        let mut payload = map! { "task_id" => job.task_id.as_str(), "subtask_id" => job.subtask_id.as_str() };
        match outcome {
            Ok(output) => {
                payload.insert("ok".into(), true.into());
                payload.insert("output".into(), output.into());
            }
            Err((code, detail)) => {
                payload.insert("ok".into(), false.into());
                payload.insert("error".into(), map! { "code" => code, "detail" => detail }.into());
            }
        }
        self.identity.notice(ctx, Protocol::Aip, "subtask_result", &job.leader, None, payload);
        job.wait = Wait::Done;
    }

    /// Advances a job until it has to wait or is done.
    fn run(&mut self, ctx: &mut ActorCtx, key: &(String, String)) {
        let Some(mut job) = self.jobs.remove(key) else { return };
        job.wait = Wait::Start;
        while job.wait == Wait::Start {
            let Some(step) = self.script.steps.get(job.pc).cloned() else {
                self.finish(ctx, &mut job, Ok(Map::new()));
                break;
            };
            if let Err(detail) = self.step(ctx, &mut job, &step) {
                self.finish(ctx, &mut job, Err(("script_error".into(), detail)));
            }
        }
        if let Wait::Tool(id) = &job.wait {
            self.calls.insert(*id, key.clone());
        }
        self.jobs.insert(key.clone(), job);
    }

    /// Runs one step. Leaves `wait` at `Start` to continue with the next.
    fn step(&mut self, ctx: &mut ActorCtx, job: &mut Job, step: &Step) -> Result<(), String> {
        match step {
            Step::Call { tool, args, .. } => {
                let Some(tm) = self.tool_manager.clone() else {
                    return Err("no tool manager configured".into());
                };
                if !self.has_session() {
                    job.wait = Wait::Session;
                    return Ok(());
                }
                let args = resolve_map(args, &job.scratch)?;
                let id = self.identity.request(ctx, Protocol::Atp, "tool_invoke", &tm, map! { "tool_id" => tool.as_str(), "args" => args });
                job.wait = Wait::Tool(id);
            }
            Step::Rank { from, by, top, save } => {
                let items = lookup(&job.scratch, from).and_then(Value::as_list).ok_or_else(|| format!("{from} is not a list"))?;
                let ranked = rank(items, by, *top);
                job.scratch.insert(save.clone(), Value::List(ranked));
                job.pc += 1;
            }
            Step::Ask { kind, topic, when, params, options, note, .. } => {
                if let Some(c) = when {
                    if lookup(&job.scratch, &c.path) != Some(&c.equals) {
                        job.pc += 1;
                        return Ok(());
                    }
                }
                job.threads += 1;
                let thread_id = format!("{}/{}", job.subtask_id, job.threads);
                let mut extra = map! { "topic" => topic.as_str(), "params" => resolve_map(params, &job.scratch)? };
                if let Some(o) = options {
                    extra.insert("options".into(), resolve(o, &job.scratch)?);
                }
                if let Some(n) = note {
                    extra.insert("note".into(), n.as_str().into());
                }
                self.negotiate(ctx, job, &thread_id, *kind, extra);
                job.wait = Wait::Thread(thread_id);
            }
            Step::RejectIfEmpty { from, reason } => {
                let empty = lookup(&job.scratch, from).and_then(Value::as_list).is_none_or(|l| l.is_empty());
                if empty {
                    job.threads += 1;
                    let thread_id = format!("{}/{}", job.subtask_id, job.threads);
                    self.negotiate(ctx, job, &thread_id, NegotiationKind::Reject, map! { "note" => reason.as_str() });
                    job.wait = Wait::Done;
                } else {
                    job.pc += 1;
                }
            }
            Step::Finish { output } => {
                let out = resolve_map(output, &job.scratch)?;
                self.finish(ctx, job, Ok(out));
            }
        }
        Ok(())
    }

    fn on_tool_result(&mut self, ctx: &mut ActorCtx, env: &Envelope) {
        let Some(key) = env.correlation_id.and_then(|c| self.calls.remove(&c)) else {
            return ctx.info("tool result for no call");
        };
        let Some(job) = self.jobs.get_mut(&key) else { return };
        let Some(Step::Call { save, .. }) = self.script.steps.get(job.pc).cloned() else { return };
        match read_tool_result(env) {
            Ok(reply) => {
                job.scratch.insert(save, reply.output);
                job.pc += 1;
                self.run(ctx, &key);
            }
            Err((code, detail)) => {
                let mut job = self.jobs.remove(&key).expect("present");
                self.finish(ctx, &mut job, Err((code, detail)));
                self.jobs.insert(key, job);
            }
        }
    }

    fn on_negotiate(&mut self, ctx: &mut ActorCtx, env: &Envelope) {
        let (Ok(key), Ok(thread)) = (Self::key(env), str_field(env, "thread_id")) else {
            return ctx.info("malformed negotiate");
        };
        let Some(job) = self.jobs.get_mut(&key) else {
            return ctx.info(format!("negotiate for unknown sub-task {}", key.1));
        };
        if job.wait != Wait::Thread(thread.to_string()) || env.sender != job.leader {
            return ctx.info(format!("negotiate on idle thread {thread}"));
        }
        match opt_str(env, "kind") {
            Some("accept") => {
                let params = map_field(env, "params");
                if let Some(Value::Map(p)) = job.scratch.get_mut("params") {
                    p.extend(params.clone());
                }
                if let Some(Step::Ask { save: Some(s), .. }) = self.script.steps.get(job.pc) {
                    job.scratch.insert(s.clone(), Value::Map(params));
                }
                job.pc += 1;
                self.run(ctx, &key);
            }
            Some("reject") => job.wait = Wait::Done,
            other => ctx.info(format!("unsupported negotiation answer {other:?}")),
        }
    }

    fn resume_after_session(&mut self, ctx: &mut ActorCtx) {
        let waiting: Vec<_> = self.jobs.iter().filter(|(_, j)| j.wait == Wait::Session).map(|(k, _)| k.clone()).collect();
        for k in waiting {
            self.run(ctx, &k);
        }
    }
}

impl Actor for WorkerAgent {
    fn principal(&self) -> Principal {
        self.identity.principal.clone()
    }

    fn on_start(&mut self, ctx: &mut ActorCtx) {
        if let Some(d) = &self.descriptor {
            send_register(&self.identity, d, ctx);
        }
        if let Some(tm) = self.tool_manager.clone() {
            if let Err(e) = self.handshakes.initiate(&self.identity, &tm, ctx) {
                ctx.info(format!("cannot authenticate with {tm}: {e}"));
            }
        }
    }

    fn on_message(&mut self, env: Envelope, ctx: &mut ActorCtx) {
        match (env.protocol, env.msg_type.as_str()) {
            (Protocol::A3ap, _) => match self.handshakes.handle(&self.identity, &env, ctx) {
                Some(HandshakeEvent::Established(_)) => self.resume_after_session(ctx),
                Some(HandshakeEvent::Failed { peer, error }) => ctx.info(format!("handshake with {peer} failed: {error}")),
                None => {}
            },
            (Protocol::Arp, "register_result") => {
                self.registered = Some(if env.get("ok").and_then(Value::as_bool) == Some(true) {
                    Ok(env.get("anchor_seq").and_then(Value::as_int).unwrap_or_default() as u64)
                } else {
                    Err(env.get("error").map(|e| e.to_string()).unwrap_or_default())
                });
            }
            (Protocol::Aip, "group_invite") => {
                let task_id = opt_str(&env, "task_id").unwrap_or_default().to_string();
                let reply = if self.script.decline_invites { "group_decline" } else { "group_accept" };
                self.identity.reply(ctx, &env, reply, map! { "task_id" => task_id });
            }
            (Protocol::Aip, "subtask_assign") => self.on_assign(ctx, &env),
            (Protocol::Aip, "subtask_start") => self.on_start_msg(ctx, &env),
            (Protocol::Aip, "negotiate") => self.on_negotiate(ctx, &env),
            (Protocol::Atp, "tool_result") => self.on_tool_result(ctx, &env),
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
