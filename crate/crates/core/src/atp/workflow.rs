//! DAG workflows over tools: static validation and a deterministic executor
//! with per-step retries and an append-only trace.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::context::Context;
use super::manager::ToolResolver;
use super::tool::{ToolDescriptor, ToolError};
use crate::a3ap::ledger::{Ledger, LedgerError, UnitKind};
use crate::a3ap::SessionId;
use crate::id::Principal;
use crate::schema::{FieldType, ValidationReport, Violation};
use crate::value::{canonical_encode, Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "from", rename_all = "snake_case")]
pub enum Binding {
    Literal { value: Value },
    Context { key: String },
    /// Output of an upstream step, or one field of it.
    Step {
        step: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        field: Option<String>,
    },
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    #[serde(default = "one")]
    pub max_attempts: u32,
    /// Error codes worth another attempt.
    #[serde(default)]
    pub retriable: BTreeSet<String>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 1, retriable: BTreeSet::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowStep {
    pub step_id: String,
    pub tool_id: String,
    #[serde(default)]
    pub inputs: BTreeMap<String, Binding>,
    pub output_key: String,
    #[serde(default)]
    pub retry: RetryPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowDefinition {
    pub workflow_id: String,
    pub steps: Vec<WorkflowStep>,
    /// `(before, after)`: `after` runs only once `before` is done.
    #[serde(default)]
    pub edges: Vec<(String, String)>,
}

impl WorkflowDefinition {
    fn step(&self, id: &str) -> Option<&WorkflowStep> {
        self.steps.iter().find(|s| s.step_id == id)
    }

    fn parents(&self) -> BTreeMap<&str, BTreeSet<&str>> {
        let mut m: BTreeMap<&str, BTreeSet<&str>> = self.steps.iter().map(|s| (s.step_id.as_str(), BTreeSet::new())).collect();
        for (a, b) in &self.edges {
            m.entry(b.as_str()).or_default().insert(a.as_str());
        }
        m
    }

    /// Transitive predecessors of every step. Assumes the edges are acyclic.
    pub fn ancestors(&self) -> BTreeMap<String, BTreeSet<String>> {
        let parents = self.parents();
        let mut out = BTreeMap::new();
        for s in &self.steps {
            let mut seen = BTreeSet::new();
            let mut stack: Vec<&str> = parents.get(s.step_id.as_str()).into_iter().flatten().copied().collect();
            while let Some(p) = stack.pop() {
                if seen.insert(p.to_string()) {
                    stack.extend(parents.get(p).into_iter().flatten().copied());
                }
            }
            out.insert(s.step_id.clone(), seen);
        }
        out
    }
}

fn find_cycle(def: &WorkflowDefinition) -> Option<Vec<String>> {
    let mut children: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (a, b) in &def.edges {
        children.entry(a.as_str()).or_default().push(b.as_str());
    }
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state: BTreeMap<&str, u8> = BTreeMap::new();
    fn dfs<'a>(
        n: &'a str,
        children: &BTreeMap<&'a str, Vec<&'a str>>,
        state: &mut BTreeMap<&'a str, u8>,
        stack: &mut Vec<&'a str>,
    ) -> Option<Vec<String>> {
        state.insert(n, 1);
        stack.push(n);
        for &c in children.get(n).into_iter().flatten() {
            match state.get(c).copied().unwrap_or(0) {
                1 => {
                    let start = stack.iter().position(|s| *s == c).expect("on stack");
                    let mut cycle: Vec<String> = stack[start..].iter().map(|s| s.to_string()).collect();
                    cycle.push(c.to_string());
                    return Some(cycle);
                }
                0 => {
                    if let Some(c) = dfs(c, children, state, stack) {
                        return Some(c);
                    }
                }
                _ => {}
            }
        }
        stack.pop();
        state.insert(n, 2);
        None
    }
    let nodes: BTreeSet<&str> = def.edges.iter().flat_map(|(a, b)| [a.as_str(), b.as_str()]).collect();
    for n in nodes {
        if state.get(n).copied().unwrap_or(0) == 0 {
            if let Some(c) = dfs(n, &children, &mut state, &mut Vec::new()) {
                return Some(c);
            }
        }
    }
    None
}

/// Checks structure, acyclicity, tool existence and binding types.
/// Context keys are checked against `initial` and upstream output keys.
pub fn validate_workflow(def: &WorkflowDefinition, tools: &dyn ToolResolver, initial: &Context) -> ValidationReport {
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (i, s) in def.steps.iter().enumerate() {
        if !ids.insert(s.step_id.as_str()) {
            out.push(Violation::new(format!("steps[{i}].step_id"), "duplicate", format!("step {} defined twice", s.step_id)));
        }
        if s.retry.max_attempts == 0 {
            out.push(Violation::new(format!("steps[{i}].retry.max_attempts"), "range", "must be at least 1"));
        }
    }
    for (i, (a, b)) in def.edges.iter().enumerate() {
        for (side, n) in [("0", a), ("1", b)] {
            if !ids.contains(n.as_str()) {
                out.push(Violation::new(format!("edges[{i}][{side}]"), "unknown_step", format!("no step {n}")));
            }
        }
    }
    if let Some(cycle) = find_cycle(def) {
        out.push(Violation::new("edges", "cycle", cycle.join(" -> ")));
        return ValidationReport::from_violations(out);
    }
    let ancestors = def.ancestors();
    let tool_of: BTreeMap<&str, Option<ToolDescriptor>> =
        def.steps.iter().map(|s| (s.step_id.as_str(), tools.describe(&s.tool_id))).collect();

    for (i, s) in def.steps.iter().enumerate() {
        let Some(tool) = tool_of[s.step_id.as_str()].as_ref() else {
            out.push(Violation::new(format!("steps[{i}].tool_id"), "unknown_tool", format!("{} is not resolvable", s.tool_id)));
            continue;
        };
        let upstream = &ancestors[&s.step_id];
        if let FieldType::Map { fields, .. } = &tool.operation.input {
            for (name, f) in fields {
                if !f.optional && !s.inputs.contains_key(name) {
                    out.push(Violation::new(format!("steps[{i}].inputs.{name}"), "required", "input not bound"));
                }
            }
        }
        for (name, b) in &s.inputs {
            let path = format!("steps[{i}].inputs.{name}");
            let want = tool.operation.input.field(name).map(|f| &f.ty);
            let open = matches!(tool.operation.input, FieldType::Map { open: true, .. });
            if want.is_none() && !open {
                out.push(Violation::new(path, "unknown_field", format!("{} takes no input {name}", s.tool_id)));
                continue;
            }
            let source_type = |step: &str, field: &Option<String>| -> Result<Option<FieldType>, Violation> {
                let Some(Some(d)) = tool_of.get(step) else { return Ok(None) };
                match field {
                    None => Ok(Some(d.operation.output.clone())),
                    Some(f) => d
                        .operation
                        .output
                        .field(f)
                        .map(|fd| Some(fd.ty.clone()))
                        .ok_or_else(|| Violation::new(&path, "unknown_field", format!("{step} has no output field {f}"))),
                }
            };
            let mismatch = |t: &FieldType, what: &str| -> Option<Violation> {
                let want = want?;
                (t != want).then(|| Violation::new(&path, "type", format!("expected {}, {what} {}", want.name(), t.name())))
            };
            match b {
                Binding::Literal { value } => out.extend(want.map(|w| w.check(value, &path)).unwrap_or_default()),
                Binding::Step { step, field } => {
                    if def.step(step).is_none() {
                        out.push(Violation::new(&path, "unknown_step", format!("no step {step}")));
                    } else if !upstream.contains(step) {
                        out.push(Violation::new(&path, "not_upstream", format!("{step} is not upstream of {}", s.step_id)));
                    } else {
                        match source_type(step, field) {
                            Ok(Some(t)) => out.extend(mismatch(&t, "upstream yields")),
                            Ok(None) => {}
                            Err(v) => out.push(v),
                        }
                    }
                }
                Binding::Context { key } => {
                    let writer = def.steps.iter().find(|w| &w.output_key == key && upstream.contains(&w.step_id));
                    match (writer, initial.latest(key)) {
                        (Some(w), _) => {
                            if let Ok(Some(t)) = source_type(&w.step_id, &None) {
                                out.extend(mismatch(&t, &format!("{key} holds")));
                            }
                        }
                        (None, Some(e)) => out.extend(want.map(|w| w.check(&e.value, &path)).unwrap_or_default()),
                        (None, None) => out.push(Violation::new(&path, "unknown_key", format!("nothing upstream writes {key}"))),
                    }
                }
            }
        }
    }
    ValidationReport::from_violations(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum StepStatus {
    Pending,
    Running,
    Done,
    Failed { attempts: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Error { code: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step_id: String,
    pub attempt: u32,
    pub input_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_hash: Option<String>,
    pub start: u64,
    pub end: u64,
    #[serde(flatten)]
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "run", rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed { step: String, attempts: u32 },
    Invalid { report: ValidationReport },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkflowRun {
    pub run_id: String,
    pub workflow_id: String,
    pub status: BTreeMap<String, StepStatus>,
    pub trace: Vec<TraceEntry>,
    #[serde(flatten)]
    pub outcome: RunStatus,
}

/// Who pays for the calls a run makes, and on which session.
#[derive(Debug, Clone)]
pub struct Meter {
    pub ledger: Ledger,
    pub session: SessionId,
    pub payer: Principal,
    pub payee: Principal,
}

/// Usage of one successful call as it appears in a `tool_result`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub tokens: u64,
    pub calls: u64,
}

impl Meter {
    /// Bills one successful call: its token cost (if any) and one call unit.
    pub fn charge(&self, cost_tokens: u64, at: u64) -> Result<Usage, LedgerError> {
        if cost_tokens > 0 {
            self.ledger.record_usage(self.session, &self.payer, &self.payee, cost_tokens, UnitKind::Tokens, at)?;
        }
        self.ledger.record_usage(self.session, &self.payer, &self.payee, 1, UnitKind::Calls, at)?;
        Ok(Usage { tokens: cost_tokens, calls: 1 })
    }
}

pub fn hash_value(v: &Value) -> String {
    hex::encode(Sha256::digest(canonical_encode(v).expect("tool values encode")))
}

fn resolve_inputs(
    step: &WorkflowStep,
    ctx: &Context,
    outputs: &BTreeMap<String, Value>,
    upstream: &BTreeSet<String>,
) -> Result<Value, ToolError> {
    let mut args = Map::new();
    for (name, b) in &step.inputs {
        let v = match b {
            Binding::Literal { value } => value.clone(),
            Binding::Context { key } => ctx.read(key, upstream).map(|e| e.value.clone()).ok_or_else(|| unbound(name))?,
            Binding::Step { step, field } => {
                let out = outputs.get(step).ok_or_else(|| unbound(name))?;
                match field {
                    None => out.clone(),
                    Some(f) => out.as_map().and_then(|m| m.get(f)).cloned().ok_or_else(|| unbound(name))?,
                }
            }
        };
        args.insert(name.clone(), v);
    }
    Ok(Value::Map(args))
}

fn unbound(name: &str) -> ToolError {
    ToolError::failure("unbound_input", format!("no value for {name}"))
}

/// Executes a validated workflow. Ready steps run in step id order; each
/// step is retried while its error code is retriable and attempts remain.
/// `clock` advances by one at every attempt start and end.
pub fn execute_workflow(
    def: &WorkflowDefinition,
    ctx: &mut Context,
    tools: &mut dyn ToolResolver,
    meter: Option<&Meter>,
    clock: &mut u64,
    run_id: &str,
) -> WorkflowRun {
    let mut run = WorkflowRun {
        run_id: run_id.to_string(),
        workflow_id: def.workflow_id.clone(),
        status: def.steps.iter().map(|s| (s.step_id.clone(), StepStatus::Pending)).collect(),
        trace: Vec::new(),
        outcome: RunStatus::Running,
    };
    let report = validate_workflow(def, tools, ctx);
    if !report.ok {
        run.outcome = RunStatus::Invalid { report };
        return run;
    }
    let parents = def.parents();
    let ancestors = def.ancestors();
    let mut outputs: BTreeMap<String, Value> = BTreeMap::new();

    loop {
        let ready = def
            .steps
            .iter()
            .filter(|s| run.status[&s.step_id] == StepStatus::Pending)
            .filter(|s| parents[s.step_id.as_str()].iter().all(|p| run.status[*p] == StepStatus::Done))
            .min_by(|a, b| a.step_id.cmp(&b.step_id));
        let Some(step) = ready else { break };
        run.status.insert(step.step_id.clone(), StepStatus::Running);
        let upstream = &ancestors[&step.step_id];
        let mut attempt = 0;
        loop {
            attempt += 1;
            *clock += 1;
            let start = *clock;
            let (input_hash, result) = match resolve_inputs(step, ctx, &outputs, upstream) {
                Ok(args) => (hash_value(&args), tools.invoke(&step.tool_id, &args)),
                Err(e) => (String::new(), Err(e)),
            };
            *clock += 1;
            let end = *clock;
            match result {
                Ok(inv) => {
                    if let Some(m) = meter {
                        m.charge(inv.cost_tokens, end).expect("run metering needs an open session");
                    }
                    run.trace.push(TraceEntry {
                        step_id: step.step_id.clone(),
                        attempt,
                        input_hash,
                        output_hash: Some(hash_value(&inv.output)),
                        start,
                        end,
                        outcome: Outcome::Success,
                    });
                    ctx.write(&step.output_key, inv.output.clone(), &step.step_id);
                    outputs.insert(step.step_id.clone(), inv.output);
                    run.status.insert(step.step_id.clone(), StepStatus::Done);
                    break;
                }
                Err(e) => {
                    run.trace.push(TraceEntry {
                        step_id: step.step_id.clone(),
                        attempt,
                        input_hash,
                        output_hash: None,
                        start,
                        end,
                        outcome: Outcome::Error { code: e.code().to_string(), detail: e.to_string() },
                    });
                    let again = attempt < step.retry.max_attempts && step.retry.retriable.contains(e.code());
                    if !again {
                        run.status.insert(step.step_id.clone(), StepStatus::Failed { attempts: attempt });
                        run.outcome = RunStatus::Failed { step: step.step_id.clone(), attempts: attempt };
                        return run;
                    }
                }
            }
        }
    }
    run.outcome = RunStatus::Completed;
    run
}
