//! The personal agent: authenticates, discovers collaborators, forms the
//! group, distributes sub-tasks, brokers negotiation with the user and
//! reports the aggregate.

use std::collections::BTreeMap;

use super::task::{
    create_task, AipError, AssignStep, Collected, Goal, NegotiationEntry, NegotiationKind, NegotiationStep, OneToOne,
    Planner, SubTask, Task, TaskState,
};
use super::{map_field, opt_str, str_field};
use crate::a3ap::handshake::{HandshakeEvent, Handshakes};
use crate::a3ap::sign::Identity;
use crate::a3ap::TrustRoots;
use crate::adp::{discover_payload, read_discover_result, MatchMode, MatchResult, Query, QueryInput};
use crate::envelope::{Envelope, MsgId, Protocol};
use crate::id::{AgentId, Principal};
use crate::map;
use crate::transport::{Actor, ActorCtx, Note};
use crate::value::{Map, Value};

/// Candidates per sub-goal from one discovery over all of the goal's tags:
/// an agent qualifies for a sub-goal when it covers all of that sub-goal's
/// tags. Discovery ranking order is kept.
pub fn rank_candidates(goal: &Goal, results: &[MatchResult]) -> BTreeMap<String, Vec<AgentId>> {
    goal.sub_goals
        .iter()
        .map(|g| {
            let agents = results.iter().filter(|r| g.required_tags.is_subset(&r.matched_required)).map(|r| r.agent.clone());
            (g.name.clone(), agents.collect())
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct PAgentConfig {
    /// Registry the agent authenticates with before anything else.
    pub registry: Principal,
    pub discovery: Principal,
    pub user: Principal,
    /// How long to wait on other parties: sim steps, or ms live.
    pub timeout: u64,
    pub discover_limit: usize,
}

pub struct PAgent {
    identity: Identity,
    cfg: PAgentConfig,
    goal: Goal,
    planner: Box<dyn Planner>,
    handshakes: Handshakes,
    task: Option<Task>,
    phase: u8,
    noted: usize,
    deadline: Option<u64>,
    discover: Option<MsgId>,
    invites: BTreeMap<MsgId, AgentId>,
    assigns: BTreeMap<MsgId, String>,
    prompts: BTreeMap<MsgId, String>,
    report: Option<Map>,
}

impl PAgent {
    pub fn new(identity: Identity, goal: Goal, cfg: PAgentConfig, roots: TrustRoots) -> Self {
        let handshakes = Handshakes::new(roots, cfg.timeout);
        Self {
            identity,
            cfg,
            goal,
            planner: Box::new(OneToOne),
            handshakes,
            task: None,
            phase: 0,
            noted: 0,
            deadline: None,
            discover: None,
            invites: BTreeMap::new(),
            assigns: BTreeMap::new(),
            prompts: BTreeMap::new(),
            report: None,
        }
    }

    pub fn with_planner(mut self, planner: impl Planner + 'static) -> Self {
        self.planner = Box::new(planner);
        self
    }

    pub fn task(&self) -> Option<&Task> {
        self.task.as_ref()
    }

    /// Last scenario phase entered, 0 before start.
    pub fn phase(&self) -> u8 {
        self.phase
    }

    /// The `task_report` payload, once sent.
    pub fn report(&self) -> Option<&Map> {
        self.report.as_ref()
    }

    pub fn finished(&self) -> bool {
        self.report.is_some()
    }

    fn me(&self) -> AgentId {
        self.identity.principal.as_agent().expect("the personal agent is an agent").clone()
    }

    fn enter(&mut self, ctx: &mut ActorCtx, phase: u8) {
        self.phase = phase;
        ctx.note(Note::Phase { phase });
    }

    fn touch(&mut self, ctx: &ActorCtx) {
        self.deadline = Some(ctx.now() + self.cfg.timeout);
    }

    fn failed(&self) -> bool {
        self.task.as_ref().is_some_and(|t| t.state == TaskState::Failed)
    }

    fn task_mut(&mut self) -> &mut Task {
        self.task.as_mut().expect("task exists once started")
    }

    /// Notes new transitions and sends the report once the task is terminal.
    fn settle(&mut self, ctx: &mut ActorCtx) {
        let Some(task) = &self.task else { return };
        for t in &task.transcript[self.noted..] {
            ctx.note(Note::Transition {
                task: task.task_id.clone(),
                from: t.from.to_string(),
                to: t.to.to_string(),
                cause: t.cause,
            });
        }
        self.noted = task.transcript.len();
        if task.state.is_terminal() && self.report.is_none() {
            if task.state == TaskState::Completed {
                self.enter(ctx, 7);
            }
            let task = self.task.as_ref().expect("checked");
            let mut report = task.report();
            report.insert("phase".into(), Value::Int(self.phase as i64));
            self.identity.notice(ctx, Protocol::Aip, "task_report", &self.cfg.user, None, report.clone());
            self.report = Some(report);
            self.deadline = None;
        }
    }

    fn abort(&mut self, ctx: &mut ActorCtx, e: AipError, cause: Option<MsgId>) {
        if let Some(t) = self.task.as_mut() {
            t.fail(e, cause);
        }
        self.settle(ctx);
    }

    fn refuse(ctx: &mut ActorCtx, env: &Envelope, e: impl ToString) {
        ctx.note(Note::Rejected { msg_id: env.msg_id, reason: e.to_string() });
    }

    fn send_discover(&mut self, ctx: &mut ActorCtx) {
        self.enter(ctx, 3);
        let q = Query {
            required_tags: self.goal.all_tags(),
            limit: self.cfg.discover_limit,
            mode: MatchMode::Loose,
            ..Query::default()
        };
        let payload = discover_payload(&QueryInput::Structured(q));
        self.discover = Some(self.identity.request(ctx, Protocol::Adp, "discover_request", &self.cfg.discovery, payload));
        self.touch(ctx);
    }

    fn on_discovered(&mut self, ctx: &mut ActorCtx, env: &Envelope) {
        let results = match read_discover_result(env) {
            Ok(r) => r,
            Err(e) => return self.abort(ctx, AipError::DiscoveryFailed(e), Some(env.msg_id)),
        };
        let ranked = rank_candidates(&self.goal, &results);
        self.enter(ctx, 4);
        match self.task_mut().start_group(ranked, Some(env.msg_id)) {
            Ok(invites) => self.send_invites(ctx, invites),
            Err(_) => self.settle(ctx),
        }
    }

    fn send_invites(&mut self, ctx: &mut ActorCtx, invites: Vec<AgentId>) {
        let task = self.task.as_ref().expect("task exists");
        let mut out = Vec::new();
        for a in invites {
            let goals: Vec<Value> =
                task.staffing.iter().filter(|(_, s)| **s == a).map(|(g, _)| Value::from(g.as_str())).collect();
            let payload = map! {
                "task_id" => task.task_id.as_str(),
                "group_id" => task.group.group_id.as_str(),
                "leader" => task.group.leader.to_string(),
                "sub_goals" => goals,
            };
            out.push((a, payload));
        }
        for (a, payload) in out {
            let id = self.identity.request(ctx, Protocol::Aip, "group_invite", &a.clone().into(), payload);
            self.invites.insert(id, a);
        }
        self.touch(ctx);
        self.settle(ctx);
    }

    fn distribute(&mut self, ctx: &mut ActorCtx) {
        self.enter(ctx, 5);
        let planner = std::mem::replace(&mut self.planner, Box::new(OneToOne));
        let plan = self.task_mut().distribute(planner.as_ref());
        self.planner = planner;
        match plan {
            Ok(plan) => {
                for s in &plan {
                    self.assign(ctx, s);
                }
            }
            Err(e) => self.abort(ctx, e, None),
        }
    }

    fn assign(&mut self, ctx: &mut ActorCtx, s: &SubTask) {
        let plan_size = self.task.as_ref().map_or(0, |t| t.plan.len());
        let payload = map! {
            "task_id" => s.parent.as_str(),
            "subtask_id" => s.subtask_id.as_str(),
            "sub_goal" => s.sub_goal.as_str(),
            "required_tags" => s.required_tags.iter().map(|t| Value::from(t.as_str())).collect::<Vec<_>>(),
            "params" => s.params.clone(),
            "depends_on" => s.depends_on.iter().map(|d| Value::from(d.as_str())).collect::<Vec<_>>(),
            "plan_size" => plan_size as i64,
        };
        let id = self.identity.request(ctx, Protocol::Aip, "subtask_assign", &s.assignee.clone().into(), payload);
        self.assigns.insert(id, s.subtask_id.clone());
        self.touch(ctx);
    }

    fn start(&mut self, ctx: &mut ActorCtx, ready: Vec<SubTask>) {
        if self.phase < 6 {
            self.enter(ctx, 6);
        }
        for s in ready {
            let inputs = self.task.as_ref().expect("task exists").inputs_for(&s);
            let payload = map! {
                "task_id" => s.parent.as_str(),
                "subtask_id" => s.subtask_id.as_str(),
                "params" => s.params.clone(),
                "inputs" => inputs,
            };
            self.identity.notice(ctx, Protocol::Aip, "subtask_start", &s.assignee.clone().into(), None, payload);
        }
    }

    fn on_group_reply(&mut self, ctx: &mut ActorCtx, env: &Envelope) {
        let Some(agent) = env.correlation_id.and_then(|c| self.invites.remove(&c)) else {
            return Self::refuse(ctx, env, "reply to no invite");
        };
        if Principal::from(agent.clone()) != env.sender {
            return Self::refuse(ctx, env, "invite answered by someone else");
        }
        let joined = env.msg_type == "group_accept";
        match self.task_mut().on_invite_reply(&agent, joined, Some(env.msg_id)) {
            Ok(invites) => {
                if !invites.is_empty() {
                    self.send_invites(ctx, invites);
                }
                self.touch(ctx);
                if self.task.as_ref().is_some_and(|t| t.state == TaskState::Distributing) {
                    self.settle(ctx);
                    self.distribute(ctx);
                }
                self.settle(ctx);
            }
            Err(e) => {
                if !self.failed() {
                    Self::refuse(ctx, env, e);
                }
                self.settle(ctx);
            }
        }
    }

    fn on_assign_reply(&mut self, ctx: &mut ActorCtx, env: &Envelope) {
        let Some(subtask) = env.correlation_id.and_then(|c| self.assigns.remove(&c)) else {
            return Self::refuse(ctx, env, "reply to no assignment");
        };
        let Some(from) = env.sender.as_agent().cloned() else {
            return Self::refuse(ctx, env, "assignment answered by a service");
        };
        let accepted = env.msg_type == "subtask_accept";
        let reason = opt_str(env, "reason").unwrap_or("rejected").to_string();
        let r = self.task_mut().on_assign_reply(&subtask, &from, accepted, &reason, Some(env.msg_id));
        self.touch(ctx);
        match r {
            Ok(AssignStep::Waiting) => {}
            Ok(AssignStep::Reassign(s)) => self.assign(ctx, &s),
            Ok(AssignStep::Executing(ready)) => {
                self.settle(ctx);
                self.start(ctx, ready);
            }
            Err(e) if !self.failed() => Self::refuse(ctx, env, e),
            Err(_) => {}
        }
        self.settle(ctx);
    }

    fn on_negotiate(&mut self, ctx: &mut ActorCtx, env: &Envelope) {
        let Some(from) = env.sender.as_agent().cloned() else {
            return Self::refuse(ctx, env, "negotiation from a service");
        };
        let parsed = (|| -> Result<_, String> {
            let kind: NegotiationKind = str_field(env, "kind")?.parse()?;
            Ok((str_field(env, "thread_id")?.to_string(), str_field(env, "subtask_id")?.to_string(), kind))
        })();
        let (thread_id, subtask_id, kind) = match parsed {
            Ok(p) => p,
            Err(e) => return Self::refuse(ctx, env, e),
        };
        let me = self.identity.principal.to_string();
        let to_leader = opt_str(env, "to").is_none_or(|to| to == me);
        let entry = NegotiationEntry {
            from,
            kind,
            params: map_field(env, "params"),
            note: opt_str(env, "note").map(str::to_string),
            msg_id: Some(env.msg_id),
        };
        let r = self.task_mut().handle_negotiation(&thread_id, &subtask_id, entry, to_leader);
        self.touch(ctx);
        match r {
            Ok(NegotiationStep::Escalate { thread_id }) => {
                self.settle(ctx);
                self.prompt_user(ctx, env, &thread_id);
            }
            Ok(_) => {}
            Err(e) => Self::refuse(ctx, env, e),
        }
        self.settle(ctx);
    }

    fn prompt_user(&mut self, ctx: &mut ActorCtx, env: &Envelope, thread_id: &str) {
        let task = self.task.as_ref().expect("task exists");
        let sub = task.subtask(str_field(env, "subtask_id").unwrap_or_default());
        let mut payload = map! {
            "task_id" => task.task_id.as_str(),
            "thread_id" => thread_id,
            "prompt_id" => opt_str(env, "topic").or(opt_str(env, "kind")).unwrap_or("prompt"),
            "kind" => opt_str(env, "kind").unwrap_or_default(),
            "from" => env.sender.to_string(),
            "sub_goal" => sub.map(|s| s.sub_goal.as_str()).unwrap_or_default(),
            "params" => map_field(env, "params"),
        };
        for k in ["options", "note"] {
            if let Some(v) = env.get(k) {
                payload.insert(k.into(), v.clone());
            }
        }
        let id = self.identity.request(ctx, Protocol::Aip, "user_prompt", &self.cfg.user, payload);
        self.prompts.insert(id, thread_id.to_string());
    }

    fn on_user_reply(&mut self, ctx: &mut ActorCtx, env: &Envelope) {
        let Some(thread_id) = env.correlation_id.and_then(|c| self.prompts.remove(&c)) else {
            return Self::refuse(ctx, env, "reply to no prompt");
        };
        if env.sender != self.cfg.user {
            return Self::refuse(ctx, env, "prompt answered by someone other than the user");
        }
        let accept = opt_str(env, "decision") == Some("accept");
        let note = opt_str(env, "note").map(str::to_string);
        let r = self.task_mut().on_user_reply(&thread_id, accept, map_field(env, "params"), note, Some(env.msg_id));
        self.touch(ctx);
        match r {
            Ok((entry, _)) => {
                let task = self.task.as_ref().expect("task exists");
                let subtask_id = task.threads[&thread_id].subtask_id.clone();
                let assignee = task.subtask(&subtask_id).expect("thread sub-task exists").assignee.clone();
                let mut payload = map! {
                    "task_id" => task.task_id.as_str(),
                    "subtask_id" => subtask_id.as_str(),
                    "thread_id" => thread_id.as_str(),
                    "kind" => entry.kind.as_str(),
                    "params" => entry.params.clone(),
                };
                if let Some(n) = &entry.note {
                    payload.insert("note".into(), n.as_str().into());
                }
                self.identity.notice(ctx, Protocol::Aip, "negotiate", &assignee.into(), None, payload);
            }
            Err(e) => Self::refuse(ctx, env, e),
        }
        self.settle(ctx);
    }

    fn on_result(&mut self, ctx: &mut ActorCtx, env: &Envelope) {
        let Some(from) = env.sender.as_agent().cloned() else {
            return Self::refuse(ctx, env, "result from a service");
        };
        let subtask_id = match str_field(env, "subtask_id") {
            Ok(s) => s.to_string(),
            Err(e) => return Self::refuse(ctx, env, e),
        };
        let outcome = if env.get("ok").and_then(Value::as_bool) == Some(true) {
            Ok(env.get("output").cloned().unwrap_or_else(|| Value::Map(Map::new())))
        } else {
            Err(env.get("error").map(|e| e.to_string()).unwrap_or_else(|| "sub-task failed".into()))
        };
        let r = self.task_mut().collect(&subtask_id, &from, outcome, Some(env.msg_id));
        self.touch(ctx);
        match r {
            Ok(Collected::Progress(ready)) => self.start(ctx, ready),
            Ok(_) => {}
            Err(e) => Self::refuse(ctx, env, e),
        }
        self.settle(ctx);
    }
}

impl Actor for PAgent {
    fn principal(&self) -> Principal {
        self.identity.principal.clone()
    }

    fn on_start(&mut self, ctx: &mut ActorCtx) {
        self.enter(ctx, 1);
        let task_id = format!("task-{}", &ctx.fresh_id().to_string()[..12]);
        match create_task(self.goal.clone(), task_id, self.me()) {
            Ok(t) => self.task = Some(t),
            Err(e) => {
                let report = map! {
                    "ok" => false,
                    "state" => "rejected",
                    "phase" => 1i64,
                    "failure" => map! { "code" => e.code(), "detail" => e.to_string() },
                };
                self.identity.notice(ctx, Protocol::Aip, "task_report", &self.cfg.user, None, report.clone());
                self.report = Some(report);
                return;
            }
        }
        self.enter(ctx, 2);
        if let Err(e) = self.handshakes.initiate(&self.identity, &self.cfg.registry, ctx) {
            self.abort(ctx, AipError::AuthFailed(e.to_string()), None);
        }
    }

    fn on_message(&mut self, env: Envelope, ctx: &mut ActorCtx) {
        if self.report.is_some() && env.protocol == Protocol::Aip {
            return Self::refuse(ctx, &env, "task already reported");
        }
        match (env.protocol, env.msg_type.as_str()) {
            (Protocol::A3ap, _) => match self.handshakes.handle(&self.identity, &env, ctx) {
                Some(HandshakeEvent::Established(s)) if s.other(&self.identity.principal) == &self.cfg.registry => {
                    if self.phase == 2 {
                        self.send_discover(ctx);
                    }
                }
                Some(HandshakeEvent::Failed { peer, error }) if peer == self.cfg.registry => {
                    self.abort(ctx, AipError::AuthFailed(error.to_string()), Some(env.msg_id))
                }
                _ => {}
            },
            (Protocol::Adp, "discover_result") if env.correlation_id.is_some() && env.correlation_id == self.discover => {
                self.discover = None;
                self.on_discovered(ctx, &env);
            }
            (Protocol::Aip, "group_accept" | "group_decline") => self.on_group_reply(ctx, &env),
            (Protocol::Aip, "subtask_accept" | "subtask_reject") => self.on_assign_reply(ctx, &env),
            (Protocol::Aip, "negotiate") => self.on_negotiate(ctx, &env),
            (Protocol::Aip, "user_reply") => self.on_user_reply(ctx, &env),
            (Protocol::Aip, "subtask_result") => self.on_result(ctx, &env),
            _ => Self::refuse(ctx, &env, format!("unexpected {} {}", env.protocol, env.msg_type)),
        }
    }

    fn on_tick(&mut self, ctx: &mut ActorCtx) {
        for ev in self.handshakes.poll_timeouts(ctx.now()) {
            if let HandshakeEvent::Failed { peer, error } = ev {
                if peer == self.cfg.registry {
                    self.abort(ctx, AipError::AuthFailed(error.to_string()), None);
                }
            }
        }
        let waiting_on_user = self.task.as_ref().is_some_and(|t| !t.prompts.is_empty());
        if let Some(d) = self.deadline {
            if ctx.now() >= d && !waiting_on_user && self.report.is_none() {
                if let Some(t) = self.task.as_mut() {
                    t.timeout();
                }
                self.settle(ctx);
            }
        }
    }
}
