//! One registry server: its records, its place in the tree and its anchor log.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::anchor::{AnchorEntry, AnchorLog};
use crate::a3ap::credential::{verify_credential, Credential, TrustRoots};
use crate::a3ap::sign::verify_envelope;
use crate::descriptor::{validate_descriptor, CapabilityDescriptor};
use crate::envelope::Envelope;
use crate::id::{AgentId, Principal, RegistryPath, ServiceId};
use crate::schema::ValidationReport;
use crate::value::{canonical_encode, from_value, to_value, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Active,
    Suspended,
    Deregistered,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Compliance {
    Approved,
    Rejected { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub credential: Credential,
    pub descriptor: CapabilityDescriptor,
    pub status: Status,
    pub registered_at: u64,
    pub updated_at: u64,
    pub anchor_seq: u64,
    pub compliance: Compliance,
}

/// The registration phases, in the order they run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    IdentityVerification,
    MetadataSubmission,
    ComplianceReview,
    Anchoring,
}

impl Phase {
    pub const ALL: [Phase; 4] =
        [Phase::IdentityVerification, Phase::MetadataSubmission, Phase::ComplianceReview, Phase::Anchoring];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::IdentityVerification => "identity_verification",
            Phase::MetadataSubmission => "metadata_submission",
            Phase::ComplianceReview => "compliance_review",
            Phase::Anchoring => "anchoring",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ArpError {
    #[error("identity rejected: {0}")]
    IdentityRejected(String),
    #[error("descriptor invalid ({} violations)", .0.violations.len())]
    DescriptorInvalid(ValidationReport),
    #[error("compliance review rejected: {0}")]
    ComplianceRejected(String),
    #[error("{agent} does not belong at registry {node}")]
    WrongNode { agent: String, node: String },
    #[error("{0} already has an active record")]
    DuplicateAgent(String),
    #[error("{0} is not registered")]
    NotRegistered(String),
    #[error("version {offered} is not newer than {stored}")]
    StaleVersion { stored: u64, offered: u64 },
    #[error("request not signed by the record's agent")]
    SignerMismatch,
    #[error("{0} not found")]
    NotFound(String),
    #[error("no child registry {0:?}")]
    UnknownChild(String),
    #[error("malformed request: {0}")]
    Malformed(String),
}

impl ArpError {
    pub fn code(&self) -> &'static str {
        match self {
            ArpError::IdentityRejected(_) => "identity_rejected",
            ArpError::DescriptorInvalid(_) => "descriptor_invalid",
            ArpError::ComplianceRejected(_) => "compliance_rejected",
            ArpError::WrongNode { .. } => "wrong_node",
            ArpError::DuplicateAgent(_) => "duplicate_agent",
            ArpError::NotRegistered(_) => "not_registered",
            ArpError::StaleVersion { .. } => "stale_version",
            ArpError::SignerMismatch => "signer_mismatch",
            ArpError::NotFound(_) => "not_found",
            ArpError::UnknownChild(_) => "unknown_child",
            ArpError::Malformed(_) => "malformed",
        }
    }
}

/// Compliance review hook. Returns the rejection reason, if any.
pub trait CompliancePolicy: Send + Sync {
    fn review(&self, d: &CapabilityDescriptor) -> Result<(), String>;
}

/// Rejects descriptors carrying any listed tag. Empty by default, so every
/// descriptor passes.
#[derive(Debug, Clone, Default)]
pub struct TagDenylist(pub BTreeSet<String>);

impl CompliancePolicy for TagDenylist {
    fn review(&self, d: &CapabilityDescriptor) -> Result<(), String> {
        match d.capability_tags.iter().find(|t| self.0.contains(*t)) {
            Some(t) => Err(format!("tag {t} is not permitted")),
            None => Ok(()),
        }
    }
}

/// What changed in the catalog view of an agent; forwarded to discovery.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "change", rename_all = "snake_case")]
pub enum CapabilityChange {
    Upsert { descriptor: CapabilityDescriptor },
    Delete { agent: AgentId, version: u64 },
}

impl CapabilityChange {
    pub fn agent(&self) -> &AgentId {
        match self {
            CapabilityChange::Upsert { descriptor } => &descriptor.agent,
            CapabilityChange::Delete { agent, .. } => agent,
        }
    }

    pub fn version(&self) -> u64 {
        match self {
            CapabilityChange::Upsert { descriptor } => descriptor.version,
            CapabilityChange::Delete { version, .. } => *version,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistrationResult {
    pub agent: AgentId,
    pub version: u64,
    pub anchor: AnchorEntry,
    pub change: CapabilityChange,
}

/// Result of a registration attempt together with the phases that ran.
/// Phases after a failing one never run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegisterOutcome {
    pub phases: Vec<(Phase, bool)>,
    pub result: Result<RegistrationResult, ArpError>,
}

/// Where a resolution continues.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Route {
    Local,
    Child(ServiceId),
    Parent(ServiceId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterRequest {
    pub credential: Credential,
    pub descriptor: CapabilityDescriptor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateRequest {
    pub descriptor: CapabilityDescriptor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeregisterRequest {
    pub agent: AgentId,
}

pub(crate) fn payload_of<T: Serialize>(t: &T) -> crate::value::Map {
    match to_value(t).expect("request encodes") {
        Value::Map(m) => m,
        _ => unreachable!("structs encode as maps"),
    }
}

pub(crate) fn parse_payload<T: serde::de::DeserializeOwned>(env: &Envelope) -> Result<T, ArpError> {
    from_value(&Value::Map(env.payload.clone())).map_err(|e| ArpError::Malformed(e.to_string()))
}

fn record_hash(op: &str, rec: &AgentRecord) -> [u8; 32] {
    let v = Value::Map(crate::map! { "op" => op, "record" => to_value(rec).expect("record encodes") });
    Sha256::digest(canonical_encode(&v).expect("record encodes")).into()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSnapshot {
    pub path: RegistryPath,
    pub parent: Option<ServiceId>,
    pub children: BTreeMap<String, ServiceId>,
    pub records: BTreeMap<AgentId, AgentRecord>,
    pub anchor: AnchorLog,
}

pub struct RegistryNode {
    path: RegistryPath,
    parent: Option<ServiceId>,
    children: BTreeMap<String, ServiceId>,
    records: BTreeMap<AgentId, AgentRecord>,
    anchor: AnchorLog,
    roots: TrustRoots,
    policy: Box<dyn CompliancePolicy>,
}

impl fmt::Debug for RegistryNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RegistryNode")
            .field("path", &self.path)
            .field("records", &self.records.len())
            .field("anchor", &self.anchor.len())
            .finish_non_exhaustive()
    }
}

impl RegistryNode {
    pub fn new(path: RegistryPath, roots: TrustRoots) -> Self {
        let parent = path.parent().map(|p| p.registry_service());
        Self {
            path,
            parent,
            children: BTreeMap::new(),
            records: BTreeMap::new(),
            anchor: AnchorLog::new(),
            roots,
            policy: Box::new(TagDenylist::default()),
        }
    }

    pub fn with_policy(mut self, policy: impl CompliancePolicy + 'static) -> Self {
        self.policy = Box::new(policy);
        self
    }

    pub fn path(&self) -> &RegistryPath {
        &self.path
    }

    pub fn service_id(&self) -> ServiceId {
        self.path.registry_service()
    }

    pub fn parent(&self) -> Option<&ServiceId> {
        self.parent.as_ref()
    }

    pub fn children(&self) -> &BTreeMap<String, ServiceId> {
        &self.children
    }

    /// Adds a child registry one level below this node.
    pub fn add_child(&mut self, segment: &str) -> Result<ServiceId, ArpError> {
        let child = self.path.child(segment).map_err(|e| ArpError::Malformed(e.to_string()))?;
        if self.children.contains_key(segment) {
            return Err(ArpError::Malformed(format!("child {segment:?} already exists")));
        }
        let id = child.registry_service();
        self.children.insert(segment.to_string(), id.clone());
        Ok(id)
    }

    pub fn trust_roots(&self) -> &TrustRoots {
        &self.roots
    }

    pub fn records(&self) -> &BTreeMap<AgentId, AgentRecord> {
        &self.records
    }

    pub fn active_records(&self) -> impl Iterator<Item = &AgentRecord> {
        self.records.values().filter(|r| r.status == Status::Active)
    }

    pub fn anchor(&self) -> &AnchorLog {
        &self.anchor
    }

    fn anchor_change(&mut self, op: &str, agent: &AgentId) -> AnchorEntry {
        let rec = self.records.get(agent).expect("record present");
        let entry = self.anchor.append(record_hash(op, rec)).clone();
        self.records.get_mut(agent).expect("record present").anchor_seq = entry.seq;
        entry
    }

    /// Runs the four registration phases in order, stopping at the first failure.
    pub fn register(&mut self, req: &Envelope, now: u64) -> RegisterOutcome {
        let mut phases = Vec::new();
        let result = self.register_phases(req, now, &mut phases);
        RegisterOutcome { phases, result }
    }

    fn register_phases(
        &mut self,
        req: &Envelope,
        now: u64,
        phases: &mut Vec<(Phase, bool)>,
    ) -> Result<RegistrationResult, ArpError> {
        let body: RegisterRequest = match parse_payload(req) {
            Ok(b) => b,
            Err(e) => {
                phases.push((Phase::IdentityVerification, false));
                return Err(e);
            }
        };
        let mut run = |phase: Phase, r: Result<(), ArpError>| {
            phases.push((phase, r.is_ok()));
            r
        };

        let agent = body.credential.agent_id().cloned();
        run(Phase::IdentityVerification, self.check_identity(req, &body, agent.as_ref()))?;
        let agent = agent.expect("identity check requires an agent id");

        run(Phase::MetadataSubmission, {
            let report = validate_descriptor(&body.descriptor);
            if !report.ok {
                Err(ArpError::DescriptorInvalid(report))
            } else if body.descriptor.agent != agent {
                Err(ArpError::Malformed("descriptor.agent differs from credential.agent".into()))
            } else if let Some(old) = self.records.get(&agent).filter(|r| body.descriptor.version <= r.descriptor.version) {
                Err(ArpError::StaleVersion { stored: old.descriptor.version, offered: body.descriptor.version })
            } else {
                Ok(())
            }
        })?;

        run(Phase::ComplianceReview, self.policy.review(&body.descriptor).map_err(ArpError::ComplianceRejected))?;

        let record = AgentRecord {
            credential: body.credential,
            descriptor: body.descriptor.clone(),
            status: Status::Active,
            registered_at: now,
            updated_at: now,
            anchor_seq: 0,
            compliance: Compliance::Approved,
        };
        self.records.insert(agent.clone(), record);
        let anchor = self.anchor_change("register", &agent);
        phases.push((Phase::Anchoring, true));
        Ok(RegistrationResult {
            version: body.descriptor.version,
            agent,
            anchor,
            change: CapabilityChange::Upsert { descriptor: body.descriptor },
        })
    }

    fn check_identity(&self, req: &Envelope, body: &RegisterRequest, agent: Option<&AgentId>) -> Result<(), ArpError> {
        verify_credential(&body.credential, &self.roots).map_err(|e| ArpError::IdentityRejected(e.to_string()))?;
        let agent = agent.ok_or_else(|| ArpError::IdentityRejected("credential is not for an agent".into()))?;
        if req.sender != Principal::Agent(agent.clone()) {
            return Err(ArpError::IdentityRejected("sender differs from credential".into()));
        }
        verify_envelope(req, &body.credential.public_key.0)
            .map_err(|e| ArpError::IdentityRejected(format!("request signature: {e}")))?;
        if agent.registry_path() != &self.path {
            return Err(ArpError::WrongNode { agent: agent.to_string(), node: self.path.to_string() });
        }
        if self.records.get(agent).is_some_and(|r| r.status == Status::Active) {
            return Err(ArpError::DuplicateAgent(agent.to_string()));
        }
        Ok(())
    }

    /// Verifies that `req` was signed by the active record's own agent.
    fn check_signer(&self, req: &Envelope, agent: &AgentId) -> Result<(), ArpError> {
        let rec = self
            .records
            .get(agent)
            .filter(|r| r.status == Status::Active)
            .ok_or_else(|| ArpError::NotRegistered(agent.to_string()))?;
        if req.sender != Principal::Agent(agent.clone()) {
            return Err(ArpError::SignerMismatch);
        }
        verify_envelope(req, &rec.credential.public_key.0).map_err(|_| ArpError::SignerMismatch)
    }

    pub fn update_capabilities(&mut self, req: &Envelope, now: u64) -> Result<RegistrationResult, ArpError> {
        let body: UpdateRequest = parse_payload(req)?;
        let agent = body.descriptor.agent.clone();
        self.check_signer(req, &agent)?;
        let report = validate_descriptor(&body.descriptor);
        if !report.ok {
            return Err(ArpError::DescriptorInvalid(report));
        }
        let stored = self.records[&agent].descriptor.version;
        if body.descriptor.version <= stored {
            return Err(ArpError::StaleVersion { stored, offered: body.descriptor.version });
        }
        self.policy.review(&body.descriptor).map_err(ArpError::ComplianceRejected)?;
        let rec = self.records.get_mut(&agent).expect("checked above");
        rec.descriptor = body.descriptor.clone();
        rec.updated_at = now.max(rec.registered_at);
        let anchor = self.anchor_change("update", &agent);
        Ok(RegistrationResult {
            version: body.descriptor.version,
            agent,
            anchor,
            change: CapabilityChange::Upsert { descriptor: body.descriptor },
        })
    }

    /// Tombstones the record. It stays stored for audit but no longer resolves.
    pub fn deregister(&mut self, req: &Envelope, now: u64) -> Result<RegistrationResult, ArpError> {
        let body: DeregisterRequest = parse_payload(req)?;
        self.check_signer(req, &body.agent)?;
        let rec = self.records.get_mut(&body.agent).expect("checked above");
        rec.status = Status::Deregistered;
        rec.updated_at = now.max(rec.registered_at);
        let version = rec.descriptor.version;
        let anchor = self.anchor_change("deregister", &body.agent);
        Ok(RegistrationResult {
            version,
            agent: body.agent.clone(),
            anchor,
            change: CapabilityChange::Delete { agent: body.agent, version },
        })
    }

    /// Next hop for resolving `id` from this node.
    pub fn route(&self, id: &AgentId) -> Result<Route, ArpError> {
        let target = id.registry_path();
        if target == &self.path {
            Ok(Route::Local)
        } else if self.path.is_proper_prefix_of(target) {
            let seg = &target.segments()[self.path.segments().len()];
            self.children.get(seg).cloned().map(Route::Child).ok_or_else(|| ArpError::UnknownChild(seg.clone()))
        } else {
            self.parent.clone().map(Route::Parent).ok_or_else(|| ArpError::NotFound(id.to_string()))
        }
    }

    /// Active record held at this node.
    pub fn resolve_local(&self, id: &AgentId) -> Result<&AgentRecord, ArpError> {
        self.records
            .get(id)
            .filter(|r| r.status == Status::Active)
            .ok_or_else(|| ArpError::NotFound(id.to_string()))
    }

    pub fn snapshot(&self) -> NodeSnapshot {
        NodeSnapshot {
            path: self.path.clone(),
            parent: self.parent.clone(),
            children: self.children.clone(),
            records: self.records.clone(),
            anchor: self.anchor.clone(),
        }
    }

    /// Canonical bytes of the node's persistent state.
    pub fn snapshot_bytes(&self) -> Vec<u8> {
        crate::value::to_canonical(&self.snapshot()).expect("snapshot encodes")
    }

    pub fn restore(snap: NodeSnapshot, roots: TrustRoots) -> Self {
        Self {
            path: snap.path,
            parent: snap.parent,
            children: snap.children,
            records: snap.records,
            anchor: snap.anchor,
            roots,
            policy: Box::new(TagDenylist::default()),
        }
    }
}

/// A whole registry tree held in one process, for resolution without messaging.
#[derive(Debug, Default)]
pub struct RegistryTree {
    nodes: BTreeMap<RegistryPath, RegistryNode>,
}

impl RegistryTree {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a node and links it under its parent, which must already exist
    /// unless the node is a root.
    pub fn insert(&mut self, node: RegistryNode) -> Result<(), ArpError> {
        if let Some(parent) = node.path.parent() {
            let seg = node.path.segments().last().expect("non-empty path").clone();
            let p = self.nodes.get_mut(&parent).ok_or_else(|| ArpError::NotFound(parent.to_string()))?;
            p.add_child(&seg)?;
        }
        self.nodes.insert(node.path.clone(), node);
        Ok(())
    }

    pub fn node(&self, path: &RegistryPath) -> Option<&RegistryNode> {
        self.nodes.get(path)
    }

    pub fn node_mut(&mut self, path: &RegistryPath) -> Option<&mut RegistryNode> {
        self.nodes.get_mut(path)
    }

    pub fn paths(&self) -> impl Iterator<Item = &RegistryPath> {
        self.nodes.keys()
    }

    pub fn depth(&self) -> usize {
        self.nodes.keys().map(RegistryPath::depth).max().unwrap_or(0)
    }

    /// Follows routes from `start` and returns the record with the number of
    /// forwards taken.
    pub fn resolve(&self, start: &RegistryPath, id: &AgentId) -> Result<(AgentRecord, usize), ArpError> {
        let mut at = start.clone();
        let mut hops = 0;
        loop {
            let node = self.nodes.get(&at).ok_or_else(|| ArpError::NotFound(at.to_string()))?;
            let next = match node.route(id)? {
                Route::Local => return node.resolve_local(id).map(|r| (r.clone(), hops)),
                Route::Child(s) | Route::Parent(s) => s,
            };
            at = registry_path_of(&next).ok_or_else(|| ArpError::NotFound(next.to_string()))?;
            hops += 1;
        }
    }
}

/// Inverse of [`RegistryPath::registry_service`].
pub fn registry_path_of(svc: &ServiceId) -> Option<RegistryPath> {
    let segs = svc.segments();
    if segs.first().map(String::as_str) != Some("registry") || segs.len() < 2 {
        return None;
    }
    RegistryPath::new(segs[1..].to_vec()).ok()
}
