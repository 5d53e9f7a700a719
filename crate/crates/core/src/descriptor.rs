//! Capability descriptors: what an agent declares about itself at registration.
//!
//! Capabilities are expressed as a controlled vocabulary of dotted lowercase
//! tags (`restaurant.search`), so matching reduces to set arithmetic. The
//! external facets (perception, decision, action, interaction) and internal
//! facets (planning, memory, self-evolution) travel with the descriptor for
//! management purposes.

use std::collections::{BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::id::AgentId;
use crate::schema::{OperationSig, ValidationReport, Violation};

/// True when `tag` matches `[a-z0-9]+(\.[a-z0-9]+)*`.
pub fn is_valid_tag(tag: &str) -> bool {
    !tag.is_empty()
        && tag
            .split('.')
            .all(|part| !part.is_empty() && part.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit()))
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Facet {
    #[serde(default)]
    pub summary: String,
    #[serde(default)]
    pub tags: BTreeSet<String>,
}

impl Facet {
    pub fn new(summary: &str, tags: &[&str]) -> Self {
        Self { summary: summary.to_string(), tags: tags.iter().map(|t| t.to_string()).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExternalFacets {
    #[serde(default)]
    pub perception: Facet,
    #[serde(default)]
    pub decision: Facet,
    #[serde(default)]
    pub action: Facet,
    #[serde(default)]
    pub interaction: Facet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MemoryFacet {
    pub short: bool,
    pub long: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct InternalFacets {
    pub task_planning: bool,
    pub memory: MemoryFacet,
    pub self_evolution: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Qos {
    pub latency_ms_p50: i64,
    pub cost_per_call_tokens: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapabilityDescriptor {
    pub agent: AgentId,
    pub capability_tags: BTreeSet<String>,
    #[serde(default)]
    pub interface: Vec<OperationSig>,
    #[serde(default)]
    pub external: ExternalFacets,
    #[serde(default)]
    pub internal: InternalFacets,
    #[serde(default)]
    pub qos: Qos,
    pub version: u64,
}

impl CapabilityDescriptor {
    pub fn new(agent: AgentId, tags: &[&str]) -> Self {
        Self {
            agent,
            capability_tags: tags.iter().map(|t| t.to_string()).collect(),
            interface: Vec::new(),
            external: ExternalFacets::default(),
            internal: InternalFacets::default(),
            qos: Qos::default(),
            version: 1,
        }
    }

    pub fn has_tags<'a>(&self, tags: impl IntoIterator<Item = &'a String>) -> bool {
        tags.into_iter().all(|t| self.capability_tags.contains(t))
    }
}

/// Checks every descriptor invariant and reports all violations found.
pub fn validate_descriptor(d: &CapabilityDescriptor) -> ValidationReport {
    let mut v = Vec::new();
    if d.capability_tags.is_empty() {
        v.push(Violation::new("capability_tags", "non_empty", "at least one capability tag is required"));
    }
    for tag in d.capability_tags.iter().filter(|t| !is_valid_tag(t)) {
        v.push(Violation::new(format!("capability_tags[{tag}]"), "tag_grammar", format!("{tag:?}")));
    }
    let mut seen = HashSet::new();
    for (i, op) in d.interface.iter().enumerate() {
        if op.name.is_empty() {
            v.push(Violation::new(format!("interface[{i}].name"), "non_empty", "operation name is empty"));
        } else if !seen.insert(op.name.as_str()) {
            v.push(Violation::new(format!("interface[{i}].name"), "unique", format!("duplicate operation {:?}", op.name)));
        }
    }
    let facets = [
        ("perception", &d.external.perception),
        ("decision", &d.external.decision),
        ("action", &d.external.action),
        ("interaction", &d.external.interaction),
    ];
    for (name, facet) in facets {
        for tag in facet.tags.iter().filter(|t| !is_valid_tag(t)) {
            v.push(Violation::new(format!("external.{name}.tags[{tag}]"), "tag_grammar", format!("{tag:?}")));
        }
    }
    if d.qos.latency_ms_p50 < 0 {
        v.push(Violation::new("qos.latency_ms_p50", "non_negative", d.qos.latency_ms_p50.to_string()));
    }
    if d.qos.cost_per_call_tokens < 0 {
        v.push(Violation::new("qos.cost_per_call_tokens", "non_negative", d.qos.cost_per_call_tokens.to_string()));
    }
    if d.version < 1 {
        v.push(Violation::new("version", "min", "version must be >= 1"));
    }
    ValidationReport::from_violations(v)
}
