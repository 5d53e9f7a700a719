//! Agent and service identifiers.
//!
//! Agents are named `acp://<registry-path>/<agent-name>`; the path locates the
//! registry node holding the agent's record. Infrastructure services are named
//! `svc://<segments>`. Every segment is 1-63 characters of `[a-z0-9-]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const AGENT_SCHEME: &str = "acp://";
pub const SERVICE_SCHEME: &str = "svc://";
const MAX_SEGMENT: usize = 63;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IdError {
    #[error("identifier must start with `{expected}`")]
    BadScheme { expected: &'static str },
    #[error("identifier has no path or name")]
    EmptyPath,
    #[error("segment {index} is not 1-63 chars of [a-z0-9-]: {segment:?}")]
    BadSegment { index: usize, segment: String },
}

pub fn is_valid_segment(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= MAX_SEGMENT
        && s.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

fn split_segments(rest: &str) -> Result<Vec<String>, IdError> {
    if rest.is_empty() {
        return Err(IdError::EmptyPath);
    }
    rest.split('/')
        .enumerate()
        .map(|(index, seg)| {
            if is_valid_segment(seg) {
                Ok(seg.to_string())
            } else {
                Err(IdError::BadSegment { index, segment: seg.to_string() })
            }
        })
        .collect()
}

/// Position of a registry node in the registration tree, e.g. `root/eu`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct RegistryPath(Vec<String>);

impl RegistryPath {
    pub fn new(segments: Vec<String>) -> Result<Self, IdError> {
        if segments.is_empty() {
            return Err(IdError::EmptyPath);
        }
        for (index, seg) in segments.iter().enumerate() {
            if !is_valid_segment(seg) {
                return Err(IdError::BadSegment { index, segment: seg.clone() });
            }
        }
        Ok(Self(segments))
    }

    pub fn segments(&self) -> &[String] {
        &self.0
    }

    /// Number of edges from the root node (the root itself has depth 0).
    pub fn depth(&self) -> usize {
        self.0.len().saturating_sub(1)
    }

    pub fn is_proper_prefix_of(&self, other: &RegistryPath) -> bool {
        self.0.len() < other.0.len() && other.0.starts_with(&self.0)
    }

    pub fn parent(&self) -> Option<RegistryPath> {
        (self.0.len() > 1).then(|| RegistryPath(self.0[..self.0.len() - 1].to_vec()))
    }

    pub fn child(&self, segment: &str) -> Result<RegistryPath, IdError> {
        if !is_valid_segment(segment) {
            return Err(IdError::BadSegment { index: self.0.len(), segment: segment.to_string() });
        }
        let mut segs = self.0.clone();
        segs.push(segment.to_string());
        Ok(RegistryPath(segs))
    }

    /// Service id of the registry node at this path.
    pub fn registry_service(&self) -> ServiceId {
        let mut segs = vec!["registry".to_string()];
        segs.extend(self.0.iter().cloned());
        ServiceId(segs)
    }
}

impl fmt::Display for RegistryPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join("/"))
    }
}

impl FromStr for RegistryPath {
    type Err = IdError;
    fn from_str(s: &str) -> Result<Self, IdError> {
        Ok(Self(split_segments(s)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AgentId {
    registry_path: RegistryPath,
    agent_name: String,
}

impl AgentId {
    pub fn new(registry_path: RegistryPath, agent_name: &str) -> Result<Self, IdError> {
        if !is_valid_segment(agent_name) {
            return Err(IdError::BadSegment {
                index: registry_path.0.len(),
                segment: agent_name.to_string(),
            });
        }
        Ok(Self { registry_path, agent_name: agent_name.to_string() })
    }

    pub fn registry_path(&self) -> &RegistryPath {
        &self.registry_path
    }

    pub fn agent_name(&self) -> &str {
        &self.agent_name
    }
}

/// Parses `acp://<path>/<name>`. Never panics; every input yields an id or a typed error.
pub fn parse_agent_id(s: &str) -> Result<AgentId, IdError> {
    let rest = s.strip_prefix(AGENT_SCHEME).ok_or(IdError::BadScheme { expected: AGENT_SCHEME })?;
    let mut segs = split_segments(rest)?;
    if segs.len() < 2 {
        return Err(IdError::EmptyPath);
    }
    let agent_name = segs.pop().expect("checked length");
    Ok(AgentId { registry_path: RegistryPath(segs), agent_name })
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{AGENT_SCHEME}{}/{}", self.registry_path, self.agent_name)
    }
}

impl FromStr for AgentId {
    type Err = IdError;
    fn from_str(s: &str) -> Result<Self, IdError> {
        parse_agent_id(s)
    }
}

/// Identifier of an infrastructure service (registry node, discovery, tool manager).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ServiceId(Vec<String>);

impl ServiceId {
    pub fn new(segments: &[&str]) -> Result<Self, IdError> {
        if segments.is_empty() {
            return Err(IdError::EmptyPath);
        }
        for (index, seg) in segments.iter().enumerate() {
            if !is_valid_segment(seg) {
                return Err(IdError::BadSegment { index, segment: seg.to_string() });
            }
        }
        Ok(Self(segments.iter().map(|s| s.to_string()).collect()))
    }

    pub fn segments(&self) -> &[String] {
        &self.0
    }
}

impl fmt::Display for ServiceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{SERVICE_SCHEME}{}", self.0.join("/"))
    }
}

impl FromStr for ServiceId {
    type Err = IdError;
    fn from_str(s: &str) -> Result<Self, IdError> {
        let rest =
            s.strip_prefix(SERVICE_SCHEME).ok_or(IdError::BadScheme { expected: SERVICE_SCHEME })?;
        Ok(Self(split_segments(rest)?))
    }
}

/// Either party kind that can send or receive an envelope.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Principal {
    Agent(AgentId),
    Service(ServiceId),
}

impl Principal {
    pub fn as_agent(&self) -> Option<&AgentId> {
        match self {
            Principal::Agent(a) => Some(a),
            Principal::Service(_) => None,
        }
    }
}

impl From<AgentId> for Principal {
    fn from(a: AgentId) -> Self {
        Principal::Agent(a)
    }
}

impl From<ServiceId> for Principal {
    fn from(s: ServiceId) -> Self {
        Principal::Service(s)
    }
}

impl fmt::Display for Principal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Principal::Agent(a) => a.fmt(f),
            Principal::Service(s) => s.fmt(f),
        }
    }
}

impl FromStr for Principal {
    type Err = IdError;
    fn from_str(s: &str) -> Result<Self, IdError> {
        if s.starts_with(SERVICE_SCHEME) {
            Ok(Principal::Service(s.parse()?))
        } else {
            Ok(Principal::Agent(parse_agent_id(s)?))
        }
    }
}

macro_rules! string_serde {
    ($($t:ty),*) => {$(
        impl Serialize for $t {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.collect_str(self)
            }
        }
        impl<'de> Deserialize<'de> for $t {
            fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    )*};
}

string_serde!(RegistryPath, AgentId, ServiceId, Principal);

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_two_level_id() {
        let id = parse_agent_id("acp://root/eu/agent-42").unwrap();
        assert_eq!(id.registry_path().segments(), ["root", "eu"]);
        assert_eq!(id.agent_name(), "agent-42");
        assert_eq!(id.to_string(), "acp://root/eu/agent-42");
    }

    #[test]
    fn boundary_errors() {
        assert_eq!(parse_agent_id("acp://root"), Err(IdError::EmptyPath));
        assert_eq!(parse_agent_id("acp://"), Err(IdError::EmptyPath));
        assert_eq!(parse_agent_id("http://root/x"), Err(IdError::BadScheme { expected: AGENT_SCHEME }));
        assert_eq!(
            parse_agent_id("acp://root/EU/x"),
            Err(IdError::BadSegment { index: 1, segment: "EU".into() })
        );
        assert_eq!(
            parse_agent_id("acp://root//x"),
            Err(IdError::BadSegment { index: 1, segment: String::new() })
        );
        let long = "a".repeat(64);
        assert!(matches!(
            parse_agent_id(&format!("acp://root/{long}")),
            Err(IdError::BadSegment { index: 1, .. })
        ));
        assert!(parse_agent_id(&format!("acp://root/{}", "a".repeat(63))).is_ok());
    }

    #[test]
    fn principal_dispatches_on_scheme() {
        let p: Principal = "svc://registry/root".parse().unwrap();
        assert!(matches!(p, Principal::Service(_)));
        let p: Principal = "acp://root/a".parse().unwrap();
        assert!(matches!(p, Principal::Agent(_)));
    }

    proptest! {
        #[test]
        fn parser_is_total(s in "\\PC{0,40}") {
            let _ = parse_agent_id(&s);
        }

        #[test]
        fn round_trips(path in prop::collection::vec("[a-z0-9-]{1,12}", 1..5), name in "[a-z0-9-]{1,12}") {
            let id = AgentId::new(RegistryPath::new(path).unwrap(), &name).unwrap();
            prop_assert_eq!(parse_agent_id(&id.to_string()).unwrap(), id);
        }
    }
}
