//! Tool and resource descriptors and the errors a tool call can end in.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::is_valid_tag;
use crate::id::Principal;
use crate::schema::{FieldType, OperationSig, Violation};
use crate::value::Map;

/// What a tool does with its resource's connector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    /// Records whose fields equal every argument they carry; output `{records: [...]}`.
    Query,
    /// The first record whose `key_field` equals the argument of that name.
    Lookup { key_field: String },
    /// Stores the arguments under `args[key_field]`; output `{key, version}`.
    Put { key_field: String },
    /// Reads what was stored under `args[key_field]`; output `{key, version, value}`.
    Get { key_field: String },
    /// Sends the arguments as JSON and returns the decoded JSON response.
    Request { method: String, path: String },
}

impl Action {
    pub fn writes(&self) -> bool {
        matches!(self, Action::Put { .. } | Action::Request { .. })
    }
}

/// Which resource serves a tool, and how.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolBinding {
    pub resource: String,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolDescriptor {
    pub tool_id: String,
    pub provider: Principal,
    pub semantic_tags: BTreeSet<String>,
    pub operation: OperationSig,
    #[serde(default)]
    pub side_effecting: bool,
    #[serde(default)]
    pub cost_tokens_per_call: i64,
    pub binding: ToolBinding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceKind {
    Dataset,
    Api,
    Store,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConnectorSpec {
    pub id: String,
    #[serde(default)]
    pub config: Map,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceDescriptor {
    pub resource_id: String,
    pub kind: ResourceKind,
    pub connector: ConnectorSpec,
    #[serde(default)]
    pub read_only: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ToolError {
    #[error("unknown tool {0}")]
    UnknownTool(String),
    #[error("tool {0} already registered")]
    DuplicateTool(String),
    #[error("bad schema: {0}")]
    BadSchema(String),
    #[error("unknown resource {0}")]
    UnknownResource(String),
    #[error("resource {0} already attached")]
    DuplicateResource(String),
    #[error("unknown connector {0}")]
    UnknownConnector(String),
    #[error("arguments do not match the input schema at {path}: {detail}")]
    ArgsSchemaMismatch { path: String, detail: String },
    #[error("tool failed ({code}): {detail}")]
    ToolFailure { code: String, detail: String },
    #[error("output violates the declared schema at {path}: {detail}")]
    OutputSchemaViolation { path: String, detail: String },
    #[error("no session with {0}")]
    NoSession(String),
}

impl ToolError {
    /// Stable code, matched against retry policies. Tool failures report
    /// the connector's own code.
    pub fn code(&self) -> &str {
        match self {
            ToolError::UnknownTool(_) => "unknown_tool",
            ToolError::DuplicateTool(_) => "duplicate_tool",
            ToolError::BadSchema(_) => "bad_schema",
            ToolError::UnknownResource(_) => "unknown_resource",
            ToolError::DuplicateResource(_) => "duplicate_resource",
            ToolError::UnknownConnector(_) => "unknown_connector",
            ToolError::ArgsSchemaMismatch { .. } => "args_schema_mismatch",
            ToolError::ToolFailure { code, .. } => code,
            ToolError::OutputSchemaViolation { .. } => "output_schema_violation",
            ToolError::NoSession(_) => "no_session",
        }
    }

    pub fn failure(code: &str, detail: impl Into<String>) -> Self {
        ToolError::ToolFailure { code: code.to_string(), detail: detail.into() }
    }

    pub(crate) fn args(v: &Violation) -> Self {
        ToolError::ArgsSchemaMismatch { path: v.path.clone(), detail: v.detail.clone() }
    }

    pub(crate) fn output(v: &Violation) -> Self {
        ToolError::OutputSchemaViolation { path: v.path.clone(), detail: v.detail.clone() }
    }
}

/// Structural checks on a descriptor before it is accepted.
pub fn check_descriptor(d: &ToolDescriptor) -> Result<(), ToolError> {
    if d.tool_id.is_empty() || !d.tool_id.split('.').all(|s| !s.is_empty()) {
        return Err(ToolError::BadSchema(format!("tool id {:?}", d.tool_id)));
    }
    if let Some(t) = d.semantic_tags.iter().find(|t| !is_valid_tag(t)) {
        return Err(ToolError::BadSchema(format!("tag {t:?}")));
    }
    if d.cost_tokens_per_call < 0 {
        return Err(ToolError::BadSchema("negative cost".into()));
    }
    for (side, ty) in [("input", &d.operation.input), ("output", &d.operation.output)] {
        if !matches!(ty, FieldType::Map { .. }) {
            return Err(ToolError::BadSchema(format!("{side} must be a record type")));
        }
    }
    Ok(())
}
