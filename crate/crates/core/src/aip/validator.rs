//! Transcript validation: replays the AIP messages of a run against the task
//! state graph and reports every message that arrives out of order.

use std::collections::{BTreeMap, BTreeSet};

use super::task::{Membership, TaskState};
use crate::envelope::{Envelope, MsgId, Protocol};
use crate::id::Principal;
use crate::schema::{ValidationReport, Violation};
use crate::value::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sub {
    Assigned,
    Rejected,
    Accepted,
    Running,
    Negotiating,
    Done,
    Failed,
}

#[derive(Debug, Default)]
struct Thread {
    open: bool,
    subtask: String,
    /// A worker asked the leader; the user must be consulted first.
    needs_prompt: bool,
    awaiting_user: bool,
}

#[derive(Debug)]
struct Model {
    leader: Option<Principal>,
    state: TaskState,
    membership: BTreeMap<Principal, Membership>,
    invites: BTreeMap<MsgId, Principal>,
    assigns: BTreeMap<MsgId, String>,
    subs: BTreeMap<String, (Principal, Vec<String>, Sub)>,
    results: BTreeMap<String, Value>,
    plan_size: Option<usize>,
    threads: BTreeMap<String, Thread>,
    prompts: BTreeMap<MsgId, String>,
    reported: bool,
}

impl Model {
    fn new() -> Self {
        Self {
            leader: None,
            state: TaskState::Created,
            membership: BTreeMap::new(),
            invites: BTreeMap::new(),
            assigns: BTreeMap::new(),
            subs: BTreeMap::new(),
            results: BTreeMap::new(),
            plan_size: None,
            threads: BTreeMap::new(),
            prompts: BTreeMap::new(),
            reported: false,
        }
    }

    fn all_accepted(&self) -> bool {
        self.plan_size.is_some_and(|n| {
            self.subs.len() == n && self.subs.values().all(|(_, _, s)| matches!(s, Sub::Accepted | Sub::Running | Sub::Done))
        })
    }

    fn executing(&self) -> bool {
        matches!(self.state, TaskState::Executing | TaskState::Escalated)
    }
}

const RESPONSES: &[(&str, &str)] = &[
    ("group_accept", "group_invite"),
    ("group_decline", "group_invite"),
    ("subtask_accept", "subtask_assign"),
    ("subtask_reject", "subtask_assign"),
    ("user_reply", "user_prompt"),
];

/// Checks the order of AIP messages; other protocols are skipped. Paths
/// are `messages[i]`, indexing the slice passed in.
pub fn validate_aip(messages: &[Envelope]) -> ValidationReport {
    let mut tasks: BTreeMap<String, Model> = BTreeMap::new();
    let mut seen: BTreeMap<MsgId, &Envelope> = BTreeMap::new();
    let mut out = Vec::new();
    for (i, env) in messages.iter().enumerate() {
        if env.protocol != Protocol::Aip {
            continue;
        }
        let path = format!("messages[{i}]");
        if let Some(err) = check_correlation(env, &seen) {
            out.push(Violation::new(&path, "correlation", err));
        } else {
            let Some(task_id) = env.get("task_id").and_then(Value::as_str) else {
                out.push(Violation::new(&path, "malformed", format!("{} without task_id", env.msg_type)));
                seen.insert(env.msg_id, env);
                continue;
            };
            let m = tasks.entry(task_id.to_string()).or_insert_with(Model::new);
            if let Err(detail) = step(m, env) {
                out.push(Violation::new(&path, "order", format!("{}: {detail}", env.msg_type)));
            }
        }
        seen.insert(env.msg_id, env);
    }
    ValidationReport::from_violations(out)
}

fn check_correlation(env: &Envelope, seen: &BTreeMap<MsgId, &Envelope>) -> Option<String> {
    let (_, req_type) = RESPONSES.iter().find(|(r, _)| *r == env.msg_type)?;
    let Some(corr) = env.correlation_id else {
        return Some("response without correlation id".into());
    };
    let Some(req) = seen.get(&corr) else {
        return Some(format!("answers {corr}, which has not been sent"));
    };
    if req.msg_type != *req_type {
        return Some(format!("answers a {} instead of a {req_type}", req.msg_type));
    }
    if req.recipient != env.sender || req.sender != env.recipient {
        return Some("response parties do not match the request".into());
    }
    None
}

fn field<'a>(env: &'a Envelope, key: &str) -> Result<&'a str, String> {
    env.get(key).and_then(Value::as_str).ok_or_else(|| format!("missing {key}"))
}

fn step(m: &mut Model, env: &Envelope) -> Result<(), String> {
    let from_leader = m.leader.as_ref() == Some(&env.sender);
    if m.reported && (from_leader || m.state == TaskState::Completed) {
        return Err("after the task report".into());
    }
    match env.msg_type.as_str() {
        "group_invite" => {
            if !matches!(m.state, TaskState::Created | TaskState::GroupForming) {
                return Err(format!("task is {}", m.state));
            }
            match &m.leader {
                None => m.leader = Some(env.sender.clone()),
                Some(l) if *l != env.sender => return Err("sent by someone other than the leader".into()),
                _ => {}
            }
            m.state = TaskState::GroupForming;
            m.membership.insert(env.recipient.clone(), Membership::Invited);
            m.invites.insert(env.msg_id, env.recipient.clone());
        }
        "group_accept" | "group_decline" => {
            let corr = env.correlation_id.expect("checked");
            if m.invites.remove(&corr).is_none() {
                return Err("invite already answered".into());
            }
            let s = if env.msg_type == "group_accept" { Membership::Joined } else { Membership::Declined };
            m.membership.insert(env.sender.clone(), s);
        }
        "subtask_assign" => {
            if !from_leader {
                return Err("not sent by the leader".into());
            }
            if !matches!(m.state, TaskState::GroupForming | TaskState::Distributing) {
                return Err(format!("task is {}", m.state));
            }
            if m.membership.values().any(|s| *s == Membership::Invited) {
                return Err("group formation still has pending invites".into());
            }
            if m.membership.get(&env.recipient) != Some(&Membership::Joined) {
                return Err(format!("{} has not joined", env.recipient));
            }
            let sub = field(env, "subtask_id")?.to_string();
            if let Some((_, _, s)) = m.subs.get(&sub) {
                if *s != Sub::Rejected {
                    return Err(format!("{sub} assigned twice"));
                }
            }
            let deps = env
                .get("depends_on")
                .and_then(Value::as_list)
                .map(|l| l.iter().filter_map(Value::as_str).map(str::to_string).collect())
                .unwrap_or_default();
            m.plan_size = env.get("plan_size").and_then(Value::as_int).map(|n| n as usize).or(m.plan_size);
            m.state = TaskState::Distributing;
            m.subs.insert(sub.clone(), (env.recipient.clone(), deps, Sub::Assigned));
            m.assigns.insert(env.msg_id, sub);
        }
        "subtask_accept" | "subtask_reject" => {
            let corr = env.correlation_id.expect("checked");
            let Some(sub) = m.assigns.remove(&corr) else {
                return Err("assignment already answered".into());
            };
            let entry = m.subs.get_mut(&sub).expect("assigned");
            entry.2 = if env.msg_type == "subtask_accept" { Sub::Accepted } else { Sub::Rejected };
            if m.state == TaskState::Distributing && m.all_accepted() {
                m.state = TaskState::Executing;
            }
        }
        "subtask_start" => {
            if !from_leader {
                return Err("not sent by the leader".into());
            }
            if !m.executing() {
                return Err(format!("task is {}", m.state));
            }
            let sub = field(env, "subtask_id")?;
            let (assignee, deps, status) = m.subs.get(sub).ok_or_else(|| format!("unknown sub-task {sub}"))?;
            if *status != Sub::Accepted || *assignee != env.recipient {
                return Err(format!("{sub} is not waiting to start"));
            }
            if let Some(d) = deps.iter().find(|d| m.subs.get(*d).is_none_or(|x| x.2 != Sub::Done)) {
                return Err(format!("{sub} started before its dependency {d} finished"));
            }
            m.subs.get_mut(sub).expect("present").2 = Sub::Running;
        }
        "negotiate" => negotiate(m, env, from_leader)?,
        "user_prompt" => {
            if !from_leader {
                return Err("not sent by the leader".into());
            }
            if !m.executing() {
                return Err(format!("task is {}", m.state));
            }
            let t = field(env, "thread_id")?;
            let th = m.threads.get_mut(t).ok_or_else(|| format!("unknown thread {t}"))?;
            if !th.open || !th.needs_prompt {
                return Err(format!("thread {t} is not waiting for the user"));
            }
            th.needs_prompt = false;
            th.awaiting_user = true;
            m.prompts.insert(env.msg_id, t.to_string());
            m.state = TaskState::Escalated;
        }
        "user_reply" => {
            let corr = env.correlation_id.expect("checked");
            let t = m.prompts.remove(&corr).ok_or("prompt already answered")?;
            m.threads.get_mut(&t).expect("prompted").awaiting_user = false;
            if m.prompts.is_empty() && m.state == TaskState::Escalated {
                m.state = TaskState::Executing;
            }
        }
        "subtask_result" => {
            if m.state == TaskState::Failed {
                return Ok(());
            }
            if !m.executing() {
                return Err(format!("task is {}", m.state));
            }
            let sub = field(env, "subtask_id")?;
            let (assignee, _, status) = m.subs.get(sub).ok_or_else(|| format!("unknown sub-task {sub}"))?;
            if *assignee != env.sender {
                return Err(format!("{sub} reported by someone other than its assignee"));
            }
            let output = env.get("output").cloned().unwrap_or(Value::Map(Default::default()));
            match status {
                Sub::Running => {}
                Sub::Done if m.results.get(sub) == Some(&output) => return Ok(()),
                Sub::Done => {
                    m.state = TaskState::Failed;
                    return Ok(());
                }
                Sub::Negotiating => return Err(format!("{sub} has an open negotiation")),
                _ => return Err(format!("{sub} was not started")),
            }
            if env.get("ok").and_then(Value::as_bool) != Some(true) {
                m.subs.get_mut(sub).expect("present").2 = Sub::Failed;
                m.state = TaskState::Failed;
                return Ok(());
            }
            m.subs.get_mut(sub).expect("present").2 = Sub::Done;
            m.results.insert(sub.to_string(), output);
            if m.plan_size == Some(m.subs.len()) && m.subs.values().all(|x| x.2 == Sub::Done) {
                m.state = TaskState::Completed;
            }
        }
        "task_report" => {
            if m.leader.is_some() && !from_leader {
                return Err("not sent by the leader".into());
            }
            let ok = env.get("ok").and_then(Value::as_bool) == Some(true);
            if ok && m.state != TaskState::Completed {
                return Err(format!("success reported while {}", m.state));
            }
            if !ok && m.state == TaskState::Completed {
                return Err("failure reported for a completed task".into());
            }
            if !ok && m.state != TaskState::Failed && m.leader.is_some() && env.get("failure").is_none() {
                return Err("failure report without a cause".into());
            }
            m.reported = true;
        }
        other => return Err(format!("not an AIP message: {other}")),
    }
    Ok(())
}

fn negotiate(m: &mut Model, env: &Envelope, from_leader: bool) -> Result<(), String> {
    if !m.executing() {
        return Err(format!("task is {}", m.state));
    }
    let sub = field(env, "subtask_id")?.to_string();
    let t = field(env, "thread_id")?.to_string();
    let kind = field(env, "kind")?;
    let status = m.subs.get(&sub).map(|x| x.2).ok_or_else(|| format!("unknown sub-task {sub}"))?;
    if !matches!(status, Sub::Running | Sub::Negotiating) {
        return Err(format!("{sub} is not running"));
    }
    let th = m.threads.entry(t.clone()).or_insert_with(|| Thread { open: true, subtask: sub.clone(), ..Thread::default() });
    if th.subtask != sub {
        return Err(format!("thread {t} belongs to {}", th.subtask));
    }
    if !th.open {
        return Err(format!("thread {t} is closed"));
    }
    if th.awaiting_user || (from_leader && th.needs_prompt) {
        return Err(format!("thread {t} is waiting for the user"));
    }
    let to_leader = m.leader.as_ref() == Some(&env.recipient)
        && env.get("to").and_then(Value::as_str).is_none_or(|to| Some(to.to_string()) == m.leader.as_ref().map(|l| l.to_string()));
    let entry = m.subs.get_mut(&sub).expect("present");
    match kind {
        "accept" => {
            th.open = false;
            entry.2 = Sub::Running;
        }
        "reject" => {
            th.open = false;
            entry.2 = Sub::Failed;
            m.state = TaskState::Failed;
        }
        "proposal" | "counter" | "info_request" => {
            entry.2 = Sub::Negotiating;
            if to_leader && !from_leader {
                th.needs_prompt = true;
            }
        }
        other => return Err(format!("unknown negotiation kind {other}")),
    }
    Ok(())
}

/// Checks recorded `(task, from, to)` transitions against the lifecycle
/// graph: each starts where the previous one of its task ended.
pub fn validate_transitions<'a>(transitions: impl IntoIterator<Item = (&'a str, TaskState, TaskState)>) -> ValidationReport {
    let mut at: BTreeMap<&str, TaskState> = BTreeMap::new();
    let mut terminal: BTreeSet<&str> = BTreeSet::new();
    let mut out = Vec::new();
    for (i, (task, from, to)) in transitions.into_iter().enumerate() {
        let path = format!("transitions[{i}]");
        let cur = *at.get(task).unwrap_or(&TaskState::Created);
        if from != cur {
            out.push(Violation::new(&path, "continuity", format!("{task} is {cur}, transition starts at {from}")));
        }
        if !from.can_move_to(to) || terminal.contains(task) {
            out.push(Violation::new(&path, "edge", format!("{from} -> {to} is not allowed")));
        }
        if to.is_terminal() {
            terminal.insert(task);
        }
        at.insert(task, to);
    }
    ValidationReport::from_violations(out)
}
