//! The human end of a task: answers the personal agent's prompts and
//! receives the final report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::opt_str;
use crate::a3ap::sign::Identity;
use crate::envelope::{Envelope, Protocol};
use crate::id::Principal;
use crate::map;
use crate::transport::{Actor, ActorCtx};
use crate::value::{Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserReply {
    pub accept: bool,
    #[serde(default)]
    pub params: Map,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Where answers to prompts come from.
pub trait ReplySource: Send {
    fn reply(&mut self, prompt: &Map) -> UserReply;
}

/// Canned replies keyed by prompt id. Unknown prompts are declined.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedReplies(pub BTreeMap<String, UserReply>);

impl ReplySource for ScriptedReplies {
    fn reply(&mut self, prompt: &Map) -> UserReply {
        let id = prompt.get("prompt_id").and_then(Value::as_str).unwrap_or_default();
        self.0.get(id).cloned().unwrap_or_else(|| UserReply {
            accept: false,
            params: Map::new(),
            note: Some(format!("no answer scripted for {id}")),
        })
    }
}

pub struct UserAgent {
    identity: Identity,
    source: Box<dyn ReplySource>,
    prompts: Vec<Map>,
    report: Option<Map>,
}

impl UserAgent {
    pub fn new(identity: Identity, source: impl ReplySource + 'static) -> Self {
        Self { identity, source: Box::new(source), prompts: Vec::new(), report: None }
    }

    pub fn prompts(&self) -> &[Map] {
        &self.prompts
    }

    pub fn report(&self) -> Option<&Map> {
        self.report.as_ref()
    }

    fn answer(&mut self, ctx: &mut ActorCtx, env: &Envelope) {
        let r = self.source.reply(&env.payload);
        let mut payload = map! {
            "task_id" => opt_str(env, "task_id").unwrap_or_default(),
            "thread_id" => opt_str(env, "thread_id").unwrap_or_default(),
            "prompt_id" => opt_str(env, "prompt_id").unwrap_or_default(),
            "decision" => if r.accept { "accept" } else { "reject" },
            "params" => r.params,
        };
        if let Some(n) = r.note {
            payload.insert("note".into(), n.into());
        }
        self.prompts.push(env.payload.clone());
        self.identity.reply(ctx, env, "user_reply", payload);
    }
}

impl Actor for UserAgent {
    fn principal(&self) -> Principal {
        self.identity.principal.clone()
    }

    fn on_message(&mut self, env: Envelope, ctx: &mut ActorCtx) {
        match (env.protocol, env.msg_type.as_str()) {
            (Protocol::Aip, "user_prompt") => self.answer(ctx, &env),
            (Protocol::Aip, "task_report") => self.report = Some(env.payload.clone()),
            _ => ctx.info(format!("ignored {} {}", env.protocol, env.msg_type)),
        }
    }
}
