//! The discovery catalog: a local, eventually consistent view of the
//! descriptors published by trusted registries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::a3ap::sign::{verify_envelope, PublicKey};
use crate::arp::CapabilityChange;
use crate::descriptor::CapabilityDescriptor;
use crate::envelope::Envelope;
use crate::id::{AgentId, Principal, ServiceId};
use crate::value::{from_value, Value};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub agent: AgentId,
    pub descriptor: CapabilityDescriptor,
    pub source_registry: ServiceId,
    pub as_of_version: u64,
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdpError {
    #[error("{0} is not a trusted registry")]
    UnknownRegistry(String),
    #[error("registry signature does not verify")]
    BadSignature,
    #[error("{agent} is outside the scope of {registry}")]
    OutOfScope { agent: AgentId, registry: ServiceId },
    #[error("malformed event: {0}")]
    Malformed(String),
}

/// What an ingested change did to the catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Applied {
    Inserted,
    Replaced,
    Removed,
    /// Older than or equal to what the catalog already holds.
    Ignored,
}

#[derive(Debug, Clone, Default)]
pub struct Catalog {
    registries: BTreeMap<ServiceId, PublicKey>,
    entries: BTreeMap<AgentId, CatalogEntry>,
    tombstones: BTreeMap<AgentId, u64>,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn trust(&mut self, registry: ServiceId, key: PublicKey) {
        self.registries.insert(registry, key);
    }

    pub fn registries(&self) -> impl Iterator<Item = &ServiceId> {
        self.registries.keys()
    }

    pub fn entries(&self) -> impl Iterator<Item = &CatalogEntry> {
        self.entries.values()
    }

    pub fn get(&self, agent: &AgentId) -> Option<&CatalogEntry> {
        self.entries.get(agent)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Marks every entry from `registry` stale (excluded from matching) or fresh.
    pub fn mark_stale(&mut self, registry: &ServiceId, stale: bool) {
        for e in self.entries.values_mut().filter(|e| &e.source_registry == registry) {
            e.stale = stale;
        }
    }

    fn source(&self, env: &Envelope) -> Result<ServiceId, AdpError> {
        let svc = match &env.sender {
            Principal::Service(s) if self.registries.contains_key(s) => s.clone(),
            other => return Err(AdpError::UnknownRegistry(other.to_string())),
        };
        verify_envelope(env, &self.registries[&svc].0).map_err(|_| AdpError::BadSignature)?;
        Ok(svc)
    }

    /// Applies one signed `capability_event`.
    pub fn ingest_event(&mut self, env: &Envelope) -> Result<Applied, AdpError> {
        let registry = self.source(env)?;
        let change: CapabilityChange =
            from_value(&Value::Map(env.payload.clone())).map_err(|e| AdpError::Malformed(e.to_string()))?;
        self.apply(&registry, change)
    }

    /// Applies every change of a signed `sync_snapshot`.
    pub fn ingest_snapshot(&mut self, env: &Envelope) -> Result<Vec<Applied>, AdpError> {
        let registry = self.source(env)?;
        let changes = env
            .get("changes")
            .and_then(Value::as_list)
            .ok_or_else(|| AdpError::Malformed("changes".into()))?;
        let parsed: Vec<CapabilityChange> = changes
            .iter()
            .map(|c| from_value(c).map_err(|e| AdpError::Malformed(e.to_string())))
            .collect::<Result<_, _>>()?;
        parsed.into_iter().map(|c| self.apply(&registry, c)).collect()
    }

    /// Applies a change already attributed to `registry`. Upserts need a
    /// version above anything seen for the agent; deletes need at least the
    /// stored version.
    pub fn apply(&mut self, registry: &ServiceId, change: CapabilityChange) -> Result<Applied, AdpError> {
        let agent = change.agent().clone();
        if &agent.registry_path().registry_service() != registry {
            return Err(AdpError::OutOfScope { agent, registry: registry.clone() });
        }
        let version = change.version();
        let seen = self.entries.get(&agent).map(|e| e.as_of_version);
        let dead = self.tombstones.get(&agent).copied();
        match change {
            CapabilityChange::Upsert { descriptor } => {
                if seen.into_iter().chain(dead).any(|v| version <= v) {
                    return Ok(Applied::Ignored);
                }
                let entry = CatalogEntry {
                    agent: agent.clone(),
                    descriptor,
                    source_registry: registry.clone(),
                    as_of_version: version,
                    stale: false,
                };
                let replaced = self.entries.insert(agent, entry).is_some();
                Ok(if replaced { Applied::Replaced } else { Applied::Inserted })
            }
            CapabilityChange::Delete { .. } => {
                if seen.is_some_and(|v| version < v) || dead.is_some_and(|v| version <= v) {
                    return Ok(Applied::Ignored);
                }
                self.tombstones.insert(agent.clone(), version);
                Ok(if self.entries.remove(&agent).is_some() { Applied::Removed } else { Applied::Ignored })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arp::change_payload;
    use crate::envelope::Protocol;
    use crate::testkit::Org;

    fn desc(name: &str, v: u64) -> CapabilityDescriptor {
        let mut d = CapabilityDescriptor::new(format!("acp://root/food/{name}").parse().unwrap(), &["restaurant.search"]);
        d.version = v;
        d
    }

    fn setup() -> (Org, Catalog, ServiceId) {
        let org = Org::new(3, &["root", "root/food"]);
        let reg = org.registry("root/food");
        let svc = match &reg.principal {
            Principal::Service(s) => s.clone(),
            _ => unreachable!(),
        };
        let mut cat = Catalog::new();
        cat.trust(svc.clone(), reg.public_key());
        (org, cat, svc)
    }

    fn event(org: &mut Org, change: &CapabilityChange) -> Envelope {
        let reg = org.registry("root/food");
        let to: Principal = "svc://discovery".parse().unwrap();
        org.envelope(&reg, Protocol::Adp, "capability_event", &to, None, change_payload(&reg.principal, change, 1))
    }

    #[test]
    fn versions_are_monotonic() {
        let (mut org, mut cat, _) = setup();
        let up = |v| CapabilityChange::Upsert { descriptor: desc("a", v) };
        assert_eq!(cat.ingest_event(&event(&mut org, &up(2))), Ok(Applied::Inserted));
        assert_eq!(cat.ingest_event(&event(&mut org, &up(1))), Ok(Applied::Ignored));
        assert_eq!(cat.ingest_event(&event(&mut org, &up(3))), Ok(Applied::Replaced));
        assert_eq!(cat.get(&desc("a", 1).agent).unwrap().as_of_version, 3);
    }

    #[test]
    fn delete_then_stale_upsert_stays_deleted() {
        let (mut org, mut cat, _) = setup();
        let agent = desc("a", 1).agent;
        cat.ingest_event(&event(&mut org, &CapabilityChange::Upsert { descriptor: desc("a", 1) })).unwrap();
        let del = CapabilityChange::Delete { agent: agent.clone(), version: 1 };
        assert_eq!(cat.ingest_event(&event(&mut org, &del)), Ok(Applied::Removed));
        let replay = CapabilityChange::Upsert { descriptor: desc("a", 1) };
        assert_eq!(cat.ingest_event(&event(&mut org, &replay)), Ok(Applied::Ignored));
        assert!(cat.is_empty());
        let back = CapabilityChange::Upsert { descriptor: desc("a", 2) };
        assert_eq!(cat.ingest_event(&event(&mut org, &back)), Ok(Applied::Inserted));
    }

    #[test]
    fn rejects_untrusted_and_tampered() {
        let (mut org, mut cat, _) = setup();
        let mut env = event(&mut org, &CapabilityChange::Upsert { descriptor: desc("a", 1) });
        env.payload.insert("extra".into(), Value::Bool(true));
        assert_eq!(cat.ingest_event(&env), Err(AdpError::BadSignature));

        let other = org.registry("root");
        let to: Principal = "svc://discovery".parse().unwrap();
        let change = CapabilityChange::Upsert { descriptor: desc("a", 1) };
        let env = org.envelope(&other, Protocol::Adp, "capability_event", &to, None, change_payload(&other.principal, &change, 1));
        assert!(matches!(cat.ingest_event(&env), Err(AdpError::UnknownRegistry(_))));
    }

    #[test]
    fn scope_is_enforced() {
        let (_, mut cat, svc) = setup();
        let mut d = desc("a", 1);
        d.agent = "acp://root/travel/a".parse().unwrap();
        assert!(matches!(cat.apply(&svc, CapabilityChange::Upsert { descriptor: d }), Err(AdpError::OutOfScope { .. })));
    }

    #[test]
    fn stale_entries_drop_out_of_matching() {
        let (_, mut cat, svc) = setup();
        cat.apply(&svc, CapabilityChange::Upsert { descriptor: desc("a", 1) }).unwrap();
        let q = super::super::Query::requiring(&["restaurant.search"]);
        assert_eq!(super::super::discover(&cat, &q).len(), 1);
        cat.mark_stale(&svc, true);
        assert!(super::super::discover(&cat, &q).is_empty());
    }
}
