//! Orchestration state for one task: the task lifecycle, its group, plan,
//! negotiation threads and results. Nothing here sends messages; the
//! P-Agent actor feeds inbound messages in and sends what comes back.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envelope::MsgId;
use crate::id::AgentId;
use crate::map;
use crate::value::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Created,
    GroupForming,
    Distributing,
    Executing,
    Escalated,
    Aggregating,
    Completed,
    Failed,
}

impl TaskState {
    pub const ALL: [TaskState; 8] = [
        TaskState::Created,
        TaskState::GroupForming,
        TaskState::Distributing,
        TaskState::Executing,
        TaskState::Escalated,
        TaskState::Aggregating,
        TaskState::Completed,
        TaskState::Failed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskState::Created => "created",
            TaskState::GroupForming => "group_forming",
            TaskState::Distributing => "distributing",
            TaskState::Executing => "executing",
            TaskState::Escalated => "escalated",
            TaskState::Aggregating => "aggregating",
            TaskState::Completed => "completed",
            TaskState::Failed => "failed",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Completed | TaskState::Failed)
    }

    /// Whether `self -> to` is an edge of the lifecycle graph. Every
    /// non-terminal state may fail.
    pub fn can_move_to(self, to: TaskState) -> bool {
        use TaskState::*;
        match (self, to) {
            (Created, GroupForming)
            | (GroupForming, Distributing)
            | (Distributing, Executing)
            | (Executing, Escalated)
            | (Escalated, Executing)
            | (Executing, Aggregating)
            | (Aggregating, Completed) => true,
            (from, Failed) => !from.is_terminal(),
            _ => false,
        }
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskState {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        TaskState::ALL.into_iter().find(|t| t.as_str() == s).ok_or_else(|| format!("unknown task state {s:?}"))
    }
}

/// One part of the user's intent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubGoal {
    pub name: String,
    pub required_tags: BTreeSet<String>,
    #[serde(default)]
    pub params: Map,
    /// Names of sub-goals whose results this one needs.
    #[serde(default)]
    pub after: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Goal {
    /// Shared by every sub-goal; a sub-goal's own params win on conflict.
    #[serde(default)]
    pub params: Map,
    #[serde(default)]
    pub sub_goals: Vec<SubGoal>,
}

impl Goal {
    pub fn sub_goal(&self, name: &str) -> Option<&SubGoal> {
        self.sub_goals.iter().find(|g| g.name == name)
    }

    /// Every tag any sub-goal requires.
    pub fn all_tags(&self) -> BTreeSet<String> {
        self.sub_goals.iter().flat_map(|g| g.required_tags.iter().cloned()).collect()
    }

    fn check(&self) -> Result<(), AipError> {
        if self.sub_goals.is_empty() || self.sub_goals.iter().any(|g| g.required_tags.is_empty()) {
            return Err(AipError::EmptyGoal);
        }
        let mut names = BTreeSet::new();
        for g in &self.sub_goals {
            if !names.insert(g.name.as_str()) {
                return Err(AipError::BadGoal(format!("sub-goal {} declared twice", g.name)));
            }
        }
        for g in &self.sub_goals {
            if let Some(a) = g.after.iter().find(|a| !names.contains(a.as_str())) {
                return Err(AipError::BadGoal(format!("{} waits for unknown sub-goal {a}", g.name)));
            }
        }
        // Kahn's algorithm: whatever cannot be ordered sits on a cycle.
        let mut done: BTreeSet<&str> = BTreeSet::new();
        while done.len() < self.sub_goals.len() {
            let ready: Vec<&str> = self
                .sub_goals
                .iter()
                .filter(|g| !done.contains(g.name.as_str()) && g.after.iter().all(|a| done.contains(a.as_str())))
                .map(|g| g.name.as_str())
                .collect();
            if ready.is_empty() {
                return Err(AipError::BadGoal("sub-goal ordering has a cycle".into()));
            }
            done.extend(ready);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubTaskStatus {
    Assigned,
    Accepted,
    Running,
    NeedsNegotiation,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubTask {
    pub subtask_id: String,
    pub parent: String,
    pub sub_goal: String,
    pub required_tags: BTreeSet<String>,
    pub params: Map,
    pub assignee: AgentId,
    pub depends_on: Vec<String>,
    pub status: SubTaskStatus,
    #[serde(default)]
    pub reassigned: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Membership {
    Invited,
    Joined,
    Declined,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub group_id: String,
    pub leader: AgentId,
    pub members: BTreeSet<AgentId>,
    pub membership: BTreeMap<AgentId, Membership>,
}

impl Group {
    pub fn status(&self, a: &AgentId) -> Option<Membership> {
        self.membership.get(a).copied()
    }

    pub fn pending(&self) -> bool {
        self.membership.values().any(|m| *m == Membership::Invited)
    }

    pub fn joined(&self) -> impl Iterator<Item = &AgentId> {
        self.membership.iter().filter(|(_, m)| **m == Membership::Joined).map(|(a, _)| a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegotiationKind {
    Proposal,
    Counter,
    Accept,
    Reject,
    InfoRequest,
}

impl NegotiationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NegotiationKind::Proposal => "proposal",
            NegotiationKind::Counter => "counter",
            NegotiationKind::Accept => "accept",
            NegotiationKind::Reject => "reject",
            NegotiationKind::InfoRequest => "info_request",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, NegotiationKind::Accept | NegotiationKind::Reject)
    }
}

impl FromStr for NegotiationKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        use NegotiationKind::*;
        [Proposal, Counter, Accept, Reject, InfoRequest]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown negotiation kind {s:?}"))
    }
}

/// One `negotiate` message as the thread records it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegotiationEntry {
    pub from: AgentId,
    pub kind: NegotiationKind,
    #[serde(default)]
    pub params: Map,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub msg_id: Option<MsgId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ThreadOutcome {
    Open,
    Accepted { params: Map },
    Rejected { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegotiationThread {
    pub thread_id: String,
    pub subtask_id: String,
    pub participants: BTreeSet<AgentId>,
    pub messages: Vec<NegotiationEntry>,
    pub outcome: ThreadOutcome,
}

impl NegotiationThread {
    pub fn new(thread_id: &str, subtask_id: &str) -> Self {
        Self {
            thread_id: thread_id.to_string(),
            subtask_id: subtask_id.to_string(),
            participants: BTreeSet::new(),
            messages: Vec::new(),
            outcome: ThreadOutcome::Open,
        }
    }

    pub fn is_open(&self) -> bool {
        self.outcome == ThreadOutcome::Open
    }

    /// Appends a message; accept and reject close the thread.
    pub fn push(&mut self, e: NegotiationEntry) -> Result<(), AipError> {
        if !self.is_open() {
            return Err(AipError::ClosedThread(self.thread_id.clone()));
        }
        self.participants.insert(e.from.clone());
        match e.kind {
            NegotiationKind::Accept => self.outcome = ThreadOutcome::Accepted { params: e.params.clone() },
            NegotiationKind::Reject => {
                self.outcome = ThreadOutcome::Rejected { reason: e.note.clone().unwrap_or_else(|| "rejected".into()) }
            }
            _ => {}
        }
        self.messages.push(e);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AipError {
    #[error("goal has no sub-goal with required tags")]
    EmptyGoal,
    #[error("malformed goal: {0}")]
    BadGoal(String),
    #[error("no agent covers sub-goal {0}")]
    DiscoveryEmpty(String),
    #[error("every candidate for sub-goal {0} declined")]
    AllDeclined(String),
    #[error("timed out while {0}")]
    Timeout(TaskState),
    #[error("{agent} rejected the assignment: {reason}")]
    AssignRejected { agent: AgentId, reason: String },
    #[error("negotiation thread {0} is closed")]
    ClosedThread(String),
    #[error("unknown sub-task {0}")]
    UnknownSubtask(String),
    #[error("result for unknown sub-task {0}")]
    ResultForUnknownSubtask(String),
    #[error("conflicting result for sub-task {0}")]
    DuplicateResult(String),
    #[error("sub-task {0} has an open negotiation")]
    OpenNegotiation(String),
    #[error("sub-goal {sub_goal} failed: {reason}")]
    SubtaskFailed { sub_goal: String, reason: String },
    #[error("{op} not allowed while {state}")]
    WrongState { op: String, state: TaskState },
    #[error("unexpected message from {from}: {detail}")]
    Unexpected { from: String, detail: String },
    #[error("illegal transition {from} -> {to}")]
    IllegalTransition { from: TaskState, to: TaskState },
    #[error("authentication failed: {0}")]
    AuthFailed(String),
    #[error("discovery failed: {0}")]
    DiscoveryFailed(String),
}

impl AipError {
    pub fn code(&self) -> &'static str {
        match self {
            AipError::EmptyGoal => "empty_goal",
            AipError::BadGoal(_) => "bad_goal",
            AipError::DiscoveryEmpty(_) => "discovery_empty",
            AipError::AllDeclined(_) => "all_declined",
            AipError::Timeout(_) => "timeout",
            AipError::AssignRejected { .. } => "assign_rejected",
            AipError::ClosedThread(_) => "closed_thread",
            AipError::UnknownSubtask(_) => "unknown_subtask",
            AipError::ResultForUnknownSubtask(_) => "result_for_unknown_subtask",
            AipError::DuplicateResult(_) => "duplicate_result",
            AipError::OpenNegotiation(_) => "open_negotiation",
            AipError::SubtaskFailed { .. } => "subtask_failed",
            AipError::WrongState { .. } => "wrong_state",
            AipError::Unexpected { .. } => "unexpected",
            AipError::IllegalTransition { .. } => "illegal_transition",
            AipError::AuthFailed(_) => "auth_failed",
            AipError::DiscoveryFailed(_) => "discovery_failed",
        }
    }

    /// The sub-goal a failure is about, if any.
    pub fn sub_goal(&self) -> Option<&str> {
        match self {
            AipError::DiscoveryEmpty(g) | AipError::AllDeclined(g) => Some(g),
            AipError::SubtaskFailed { sub_goal, .. } => Some(sub_goal),
            _ => None,
        }
    }

    fn wrong_state(op: &str, state: TaskState) -> Self {
        AipError::WrongState { op: op.to_string(), state }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub from: TaskState,
    pub to: TaskState,
    pub cause: Option<MsgId>,
}

/// Turns a goal into sub-tasks for the agents staffing it.
pub trait Planner: Send {
    fn plan(&self, task_id: &str, goal: &Goal, staffing: &BTreeMap<String, AgentId>) -> Vec<SubTask>;
}

/// One sub-task per sub-goal, dependencies taken from `after`.
#[derive(Debug, Clone, Copy, Default)]
pub struct OneToOne;

pub fn subtask_id(index: usize, sub_goal: &str) -> String {
    format!("st{}-{sub_goal}", index + 1)
}

impl Planner for OneToOne {
    fn plan(&self, task_id: &str, goal: &Goal, staffing: &BTreeMap<String, AgentId>) -> Vec<SubTask> {
        let ids: BTreeMap<&str, String> =
            goal.sub_goals.iter().enumerate().map(|(i, g)| (g.name.as_str(), subtask_id(i, &g.name))).collect();
        goal.sub_goals
            .iter()
            .map(|g| {
                let mut params = goal.params.clone();
                params.extend(g.params.clone());
                SubTask {
                    subtask_id: ids[g.name.as_str()].clone(),
                    parent: task_id.to_string(),
                    sub_goal: g.name.clone(),
                    required_tags: g.required_tags.clone(),
                    params,
                    assignee: staffing[&g.name].clone(),
                    depends_on: g.after.iter().map(|a| ids[a.as_str()].clone()).collect(),
                    status: SubTaskStatus::Assigned,
                    reassigned: false,
                }
            })
            .collect()
    }
}

/// What an assignment reply leads to.
#[derive(Debug, Clone, PartialEq)]
pub enum AssignStep {
    Waiting,
    /// Send this sub-task to its new assignee.
    Reassign(SubTask),
    /// Every sub-task accepted; these may start now.
    Executing(Vec<SubTask>),
}

/// What a negotiation message leads to.
#[derive(Debug, Clone, PartialEq)]
pub enum NegotiationStep {
    /// Ask the user; the thread waits on their reply.
    Escalate { thread_id: String },
    /// Recorded, nothing to do (agent-to-agent traffic seen as a copy).
    Observed,
    /// Thread closed by acceptance; the sub-task's params were updated.
    Accepted,
    /// Thread closed by rejection; the sub-task and the task failed.
    Failed(AipError),
}

/// What a sub-task result leads to.
#[derive(Debug, Clone, PartialEq)]
pub enum Collected {
    /// Recorded; these sub-tasks became ready.
    Progress(Vec<SubTask>),
    /// Identical duplicate, or a late result for a failed task.
    Ignored,
    Completed(Vec<(String, Value)>),
    Failed(AipError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub task_id: String,
    pub goal: Goal,
    pub state: TaskState,
    pub group: Group,
    pub plan: Vec<SubTask>,
    pub results: BTreeMap<String, Value>,
    pub threads: BTreeMap<String, NegotiationThread>,
    pub transcript: Vec<Transition>,
    pub failure: Option<AipError>,
    /// Ranked candidates per sub-goal, from discovery.
    pub candidates: BTreeMap<String, Vec<AgentId>>,
    /// Current candidate per sub-goal.
    pub staffing: BTreeMap<String, AgentId>,
    /// Threads waiting on the user.
    pub prompts: BTreeSet<String>,
}

/// Validates the goal and creates a task in `Created`.
pub fn create_task(goal: Goal, task_id: impl Into<String>, leader: AgentId) -> Result<Task, AipError> {
    goal.check()?;
    let task_id = task_id.into();
    Ok(Task {
        group: Group {
            group_id: format!("{task_id}/group"),
            leader,
            members: BTreeSet::new(),
            membership: BTreeMap::new(),
        },
        task_id,
        goal,
        state: TaskState::Created,
        plan: Vec::new(),
        results: BTreeMap::new(),
        threads: BTreeMap::new(),
        transcript: Vec::new(),
        failure: None,
        candidates: BTreeMap::new(),
        staffing: BTreeMap::new(),
        prompts: BTreeSet::new(),
    })
}

impl Task {
    fn go(&mut self, to: TaskState, cause: Option<MsgId>) -> Result<(), AipError> {
        if !self.state.can_move_to(to) {
            return Err(AipError::IllegalTransition { from: self.state, to });
        }
        self.transcript.push(Transition { from: self.state, to, cause });
        self.state = to;
        Ok(())
    }

    /// Moves to `Failed` and records why. A no-op on terminal tasks.
    pub fn fail(&mut self, why: AipError, cause: Option<MsgId>) -> AipError {
        if !self.state.is_terminal() {
            self.go(TaskState::Failed, cause).expect("non-terminal states may fail");
            self.failure = Some(why.clone());
        }
        why
    }

    pub fn timeout(&mut self) -> AipError {
        let state = self.state;
        self.fail(AipError::Timeout(state), None)
    }

    pub fn subtask(&self, id: &str) -> Option<&SubTask> {
        self.plan.iter().find(|s| s.subtask_id == id)
    }

    fn subtask_mut(&mut self, id: &str) -> Option<&mut SubTask> {
        self.plan.iter_mut().find(|s| s.subtask_id == id)
    }

    fn require(&self, op: &str, states: &[TaskState]) -> Result<(), AipError> {
        if states.contains(&self.state) {
            Ok(())
        } else {
            Err(AipError::wrong_state(op, self.state))
        }
    }

    fn invite(&mut self, a: &AgentId) {
        self.group.members.insert(a.clone());
        self.group.membership.insert(a.clone(), Membership::Invited);
    }

    /// Picks the best candidate for `sub_goal` that has not declined. An
    /// agent already in the group is reused rather than invited twice.
    fn staff(&mut self, sub_goal: &str, invites: &mut Vec<AgentId>) -> Result<(), AipError> {
        let pick = self.candidates[sub_goal]
            .iter()
            .find(|a| self.group.status(a) != Some(Membership::Declined) && **a != self.group.leader)
            .cloned();
        let Some(a) = pick else {
            return Err(AipError::AllDeclined(sub_goal.to_string()));
        };
        if self.group.status(&a).is_none() {
            self.invite(&a);
            invites.push(a.clone());
        }
        self.staffing.insert(sub_goal.to_string(), a);
        Ok(())
    }

    fn staffed(&self) -> bool {
        self.goal
            .sub_goals
            .iter()
            .all(|g| self.staffing.get(&g.name).is_some_and(|a| self.group.status(a) == Some(Membership::Joined)))
    }

    /// Starts group formation from ranked candidates per sub-goal and
    /// returns the agents to invite, in sub-goal order.
    pub fn start_group(&mut self, ranked: BTreeMap<String, Vec<AgentId>>, cause: Option<MsgId>) -> Result<Vec<AgentId>, AipError> {
        self.require("form_group", &[TaskState::Created])?;
        self.go(TaskState::GroupForming, cause)?;
        self.candidates = ranked;
        let mut invites = Vec::new();
        for g in self.goal.sub_goals.clone() {
            let has_any = self.candidates.get(&g.name).is_some_and(|c| c.iter().any(|a| *a != self.group.leader));
            if !has_any {
                return Err(self.fail(AipError::DiscoveryEmpty(g.name.clone()), cause));
            }
            self.candidates.entry(g.name.clone()).or_default();
            if let Err(e) = self.staff(&g.name, &mut invites) {
                return Err(self.fail(e, cause));
            }
        }
        Ok(invites)
    }

    /// Records an invite reply. Returns further invites sent in place of a
    /// decliner; the task reaches `Distributing` once nobody is pending.
    pub fn on_invite_reply(&mut self, from: &AgentId, joined: bool, cause: Option<MsgId>) -> Result<Vec<AgentId>, AipError> {
        self.require("invite reply", &[TaskState::GroupForming])?;
        if self.group.status(from) != Some(Membership::Invited) {
            return Err(AipError::Unexpected { from: from.to_string(), detail: "no pending invite".into() });
        }
        let status = if joined { Membership::Joined } else { Membership::Declined };
        self.group.membership.insert(from.clone(), status);
        let mut invites = Vec::new();
        if !joined {
            let orphaned: Vec<String> =
                self.staffing.iter().filter(|(_, a)| *a == from).map(|(g, _)| g.clone()).collect();
            for g in orphaned {
                if let Err(e) = self.staff(&g, &mut invites) {
                    return Err(self.fail(e, cause));
                }
            }
        }
        if !self.group.pending() {
            if !self.staffed() {
                let g = self.goal.sub_goals.iter().find(|g| !self.staffing.contains_key(&g.name)).map(|g| g.name.clone());
                return Err(self.fail(AipError::AllDeclined(g.unwrap_or_default()), cause));
            }
            self.go(TaskState::Distributing, cause)?;
        }
        Ok(invites)
    }

    /// Plans the task; every sub-task returned needs a `subtask_assign`.
    pub fn distribute(&mut self, planner: &dyn Planner) -> Result<Vec<SubTask>, AipError> {
        self.require("distribute", &[TaskState::Distributing])?;
        if !self.plan.is_empty() {
            return Err(AipError::wrong_state("distribute twice", self.state));
        }
        self.plan = planner.plan(&self.task_id, &self.goal, &self.staffing);
        Ok(self.plan.clone())
    }

    pub fn on_assign_reply(
        &mut self,
        subtask_id: &str,
        from: &AgentId,
        accepted: bool,
        reason: &str,
        cause: Option<MsgId>,
    ) -> Result<AssignStep, AipError> {
        self.require("assign reply", &[TaskState::Distributing])?;
        let sub = self.subtask(subtask_id).ok_or_else(|| AipError::UnknownSubtask(subtask_id.to_string()))?;
        if sub.assignee != *from || sub.status != SubTaskStatus::Assigned {
            return Err(AipError::Unexpected { from: from.to_string(), detail: format!("no pending assignment of {subtask_id}") });
        }
        if accepted {
            self.subtask_mut(subtask_id).expect("present").status = SubTaskStatus::Accepted;
            if self.plan.iter().all(|s| s.status == SubTaskStatus::Accepted) {
                self.go(TaskState::Executing, cause)?;
                return Ok(AssignStep::Executing(self.take_ready()));
            }
            return Ok(AssignStep::Waiting);
        }
        let rejected = AipError::AssignRejected { agent: from.clone(), reason: reason.to_string() };
        if sub.reassigned {
            return Err(self.fail(rejected, cause));
        }
        let sub_goal = sub.sub_goal.clone();
        let alt = self.candidates.get(&sub_goal).and_then(|c| {
            c.iter().find(|a| *a != from && self.group.status(a) == Some(Membership::Joined)).cloned()
        });
        let Some(alt) = alt else {
            return Err(self.fail(rejected, cause));
        };
        let s = self.subtask_mut(subtask_id).expect("present");
        s.assignee = alt.clone();
        s.reassigned = true;
        let s = s.clone();
        self.staffing.insert(sub_goal, alt);
        Ok(AssignStep::Reassign(s))
    }

    /// Accepted sub-tasks whose dependencies are done, now marked running.
    pub fn take_ready(&mut self) -> Vec<SubTask> {
        let done: BTreeSet<String> =
            self.plan.iter().filter(|s| s.status == SubTaskStatus::Done).map(|s| s.subtask_id.clone()).collect();
        let mut out = Vec::new();
        for s in &mut self.plan {
            if s.status == SubTaskStatus::Accepted && s.depends_on.iter().all(|d| done.contains(d)) {
                s.status = SubTaskStatus::Running;
                out.push(s.clone());
            }
        }
        out
    }

    /// Results of a sub-task's dependencies, keyed by sub-goal name.
    pub fn inputs_for(&self, sub: &SubTask) -> Map {
        sub.depends_on
            .iter()
            .filter_map(|d| {
                let dep = self.subtask(d)?;
                Some((dep.sub_goal.clone(), self.results.get(d)?.clone()))
            })
            .collect()
    }

    /// Records one negotiation message. `to_leader` is false for copies of
    /// agent-to-agent traffic.
    pub fn handle_negotiation(
        &mut self,
        thread_id: &str,
        subtask_id: &str,
        entry: NegotiationEntry,
        to_leader: bool,
    ) -> Result<NegotiationStep, AipError> {
        self.require("negotiate", &[TaskState::Executing, TaskState::Escalated])?;
        let sub = self.subtask(subtask_id).ok_or_else(|| AipError::UnknownSubtask(subtask_id.to_string()))?;
        if !matches!(sub.status, SubTaskStatus::Running | SubTaskStatus::NeedsNegotiation) {
            return Err(AipError::Unexpected { from: entry.from.to_string(), detail: format!("{subtask_id} is not running") });
        }
        let thread = self
            .threads
            .entry(thread_id.to_string())
            .or_insert_with(|| NegotiationThread::new(thread_id, subtask_id));
        if thread.subtask_id != subtask_id {
            return Err(AipError::UnknownSubtask(subtask_id.to_string()));
        }
        if self.prompts.contains(thread_id) {
            return Err(AipError::Unexpected { from: entry.from.to_string(), detail: "thread is waiting on the user".into() });
        }
        let kind = entry.kind;
        let cause = entry.msg_id;
        let params = entry.params.clone();
        thread.push(entry)?;
        self.apply_thread_step(subtask_id, thread_id, kind, params, to_leader, cause)
    }

    fn apply_thread_step(
        &mut self,
        subtask_id: &str,
        thread_id: &str,
        kind: NegotiationKind,
        params: Map,
        to_leader: bool,
        cause: Option<MsgId>,
    ) -> Result<NegotiationStep, AipError> {
        let reason = match &self.threads[thread_id].outcome {
            ThreadOutcome::Rejected { reason } => reason.clone(),
            _ => String::new(),
        };
        let sub = self.subtask_mut(subtask_id).expect("checked");
        match kind {
            NegotiationKind::Accept => {
                sub.params.extend(params);
                sub.status = SubTaskStatus::Running;
                Ok(NegotiationStep::Accepted)
            }
            NegotiationKind::Reject => {
                sub.status = SubTaskStatus::Failed;
                let e = AipError::SubtaskFailed { sub_goal: sub.sub_goal.clone(), reason };
                Ok(NegotiationStep::Failed(self.fail(e, cause)))
            }
            _ => {
                sub.status = SubTaskStatus::NeedsNegotiation;
                if !to_leader {
                    return Ok(NegotiationStep::Observed);
                }
                self.prompts.insert(thread_id.to_string());
                if self.state == TaskState::Executing {
                    self.go(TaskState::Escalated, cause)?;
                }
                Ok(NegotiationStep::Escalate { thread_id: thread_id.to_string() })
            }
        }
    }

    /// Applies the user's answer to an escalated thread and returns the
    /// leader's closing message for it.
    pub fn on_user_reply(
        &mut self,
        thread_id: &str,
        accept: bool,
        params: Map,
        note: Option<String>,
        cause: Option<MsgId>,
    ) -> Result<(NegotiationEntry, NegotiationStep), AipError> {
        self.require("user reply", &[TaskState::Escalated])?;
        if !self.prompts.remove(thread_id) {
            return Err(AipError::Unexpected { from: "user".into(), detail: format!("no prompt for {thread_id}") });
        }
        if self.prompts.is_empty() {
            self.go(TaskState::Executing, cause)?;
        }
        let entry = NegotiationEntry {
            from: self.group.leader.clone(),
            kind: if accept { NegotiationKind::Accept } else { NegotiationKind::Reject },
            params,
            note: note.or_else(|| (!accept).then(|| "declined by user".to_string())),
            msg_id: cause,
        };
        let thread = self.threads.get_mut(thread_id).expect("prompted threads exist");
        let subtask_id = thread.subtask_id.clone();
        thread.push(entry.clone())?;
        let step = self.apply_thread_step(&subtask_id, thread_id, entry.kind, entry.params.clone(), true, cause)?;
        Ok((entry, step))
    }

    /// Records a sub-task's outcome, releasing dependents or finishing the task.
    pub fn collect(
        &mut self,
        subtask_id: &str,
        from: &AgentId,
        outcome: Result<Value, String>,
        cause: Option<MsgId>,
    ) -> Result<Collected, AipError> {
        if self.state == TaskState::Failed {
            return Ok(Collected::Ignored);
        }
        self.require("collect", &[TaskState::Executing, TaskState::Escalated])?;
        let sub = self.subtask(subtask_id).ok_or_else(|| AipError::ResultForUnknownSubtask(subtask_id.to_string()))?;
        if sub.assignee != *from {
            return Err(AipError::Unexpected { from: from.to_string(), detail: format!("not the assignee of {subtask_id}") });
        }
        match sub.status {
            SubTaskStatus::Done => {
                return if outcome.as_ref().ok() == self.results.get(subtask_id) {
                    Ok(Collected::Ignored)
                } else {
                    Ok(Collected::Failed(self.fail(AipError::DuplicateResult(subtask_id.to_string()), cause)))
                };
            }
            SubTaskStatus::NeedsNegotiation => return Err(AipError::OpenNegotiation(subtask_id.to_string())),
            SubTaskStatus::Running => {}
            _ => return Err(AipError::Unexpected { from: from.to_string(), detail: format!("{subtask_id} was never started") }),
        }
        let sub_goal = sub.sub_goal.clone();
        let value = match outcome {
            Ok(v) => v,
            Err(reason) => {
                self.subtask_mut(subtask_id).expect("present").status = SubTaskStatus::Failed;
                return Ok(Collected::Failed(self.fail(AipError::SubtaskFailed { sub_goal, reason }, cause)));
            }
        };
        self.subtask_mut(subtask_id).expect("present").status = SubTaskStatus::Done;
        self.results.insert(subtask_id.to_string(), value);
        if self.plan.iter().all(|s| s.status == SubTaskStatus::Done) {
            self.go(TaskState::Aggregating, cause)?;
            let agg = self.aggregate();
            self.go(TaskState::Completed, cause)?;
            return Ok(Collected::Completed(agg));
        }
        Ok(Collected::Progress(self.take_ready()))
    }

    /// Sub-goal name and result of every finished sub-task, in plan order.
    pub fn aggregate(&self) -> Vec<(String, Value)> {
        self.plan
            .iter()
            .filter_map(|s| Some((s.sub_goal.clone(), self.results.get(&s.subtask_id)?.clone())))
            .collect()
    }

    /// The `task_report` payload for the current state.
    pub fn report(&self) -> Map {
        let results: Vec<Value> = self
            .aggregate()
            .into_iter()
            .map(|(g, v)| Value::Map(map! { "sub_goal" => g, "output" => v }))
            .collect();
        let mut m = map! {
            "task_id" => self.task_id.as_str(),
            "ok" => self.state == TaskState::Completed,
            "state" => self.state.as_str(),
            "results" => results,
        };
        if let Some(f) = &self.failure {
            let mut fm = map! { "code" => f.code(), "detail" => f.to_string() };
            if let Some(g) = f.sub_goal() {
                fm.insert("sub_goal".into(), g.into());
            }
            m.insert("failure".into(), fm.into());
        }
        m
    }
}
