//! Agent interaction: a personal agent forms a temporary group for a task,
//! distributes sub-tasks, brokers negotiation with its user and aggregates
//! the results; scripted workers play the other side.

pub mod pagent;
pub mod task;
pub mod user;
pub mod validator;
pub mod worker;

pub use pagent::{rank_candidates, PAgent, PAgentConfig};
pub use task::{
    create_task, subtask_id, AipError, AssignStep, Collected, Goal, Group, Membership, NegotiationEntry, NegotiationKind,
    NegotiationStep, NegotiationThread, OneToOne, Planner, SubGoal, SubTask, SubTaskStatus, Task, TaskState, ThreadOutcome,
    Transition,
};
pub use user::{ReplySource, ScriptedReplies, UserAgent, UserReply};
pub use validator::{validate_aip, validate_transitions};
pub use worker::{lookup, rank, resolve, Cond, Step, WorkerAgent, WorkerScript};

use crate::envelope::Envelope;
use crate::value::{Map, Value};

pub(crate) fn str_field<'a>(env: &'a Envelope, key: &str) -> Result<&'a str, String> {
    env.get(key).and_then(Value::as_str).ok_or_else(|| format!("{} without {key}", env.msg_type))
}

pub(crate) fn opt_str<'a>(env: &'a Envelope, key: &str) -> Option<&'a str> {
    env.get(key).and_then(Value::as_str)
}

pub(crate) fn map_field(env: &Envelope, key: &str) -> Map {
    env.get(key).and_then(Value::as_map).cloned().unwrap_or_default()
}
