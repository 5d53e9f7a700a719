//! Credentials bind a principal and its public key to an owner, signed by a
//! registry authority. Trust is a static list of authority keys.

use std::collections::BTreeMap;

use ed25519_dalek::SigningKey;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::sign::{sign_bytes, verify_bytes, PublicKey};
use crate::id::{AgentId, IdError, Principal, RegistryPath, ServiceId};
use crate::value::{canonical_encode, to_value, Value};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CredentialError {
    #[error("owner id is empty")]
    EmptyOwner,
    #[error("bad name: {0}")]
    BadName(#[from] IdError),
    #[error("authority {0} is not a configured trust root")]
    UnknownAuthority(String),
    #[error("authority signature does not verify")]
    BadAuthoritySignature,
    #[error("authority {authority} may not issue ids under {subject}")]
    OutOfScope { authority: String, subject: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credential {
    /// The credentialed party. Registry-issued agent ids are the common case;
    /// infrastructure services carry credentials too so they can authenticate.
    pub agent: Principal,
    pub owner_id: String,
    pub public_key: PublicKey,
    pub issued_at: u64,
    pub authority: ServiceId,
    pub authority_signature: String,
}

impl Credential {
    fn signed_bytes(&self) -> Vec<u8> {
        let mut v = to_value(self).expect("credential encodes");
        if let Value::Map(m) = &mut v {
            m.remove("authority_signature");
        }
        canonical_encode(&v).expect("credential encodes")
    }

    pub fn agent_id(&self) -> Option<&AgentId> {
        self.agent.as_agent()
    }
}

/// A registry node acting as credential issuer.
#[derive(Clone)]
pub struct Authority {
    pub path: RegistryPath,
    pub key: SigningKey,
}

impl std::fmt::Debug for Authority {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Authority").field("path", &self.path).finish_non_exhaustive()
    }
}

impl Authority {
    pub fn new(path: RegistryPath, key: SigningKey) -> Self {
        Self { path, key }
    }

    pub fn service_id(&self) -> ServiceId {
        self.path.registry_service()
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey(self.key.verifying_key())
    }

    fn sign(&self, subject: Principal, owner_id: &str, key: PublicKey, issued_at: u64) -> Result<Credential, CredentialError> {
        if owner_id.is_empty() {
            return Err(CredentialError::EmptyOwner);
        }
        let mut cred = Credential {
            agent: subject,
            owner_id: owner_id.to_string(),
            public_key: key,
            issued_at,
            authority: self.service_id(),
            authority_signature: String::new(),
        };
        cred.authority_signature = sign_bytes(&self.key, &cred.signed_bytes());
        Ok(cred)
    }
}

/// Issues a credential for `agent_name` under the authority's registry path.
pub fn issue_credential(
    owner_id: &str,
    agent_name: &str,
    authority: &Authority,
    agent_key: PublicKey,
    issued_at: u64,
) -> Result<Credential, CredentialError> {
    let id = AgentId::new(authority.path.clone(), agent_name)?;
    authority.sign(id.into(), owner_id, agent_key, issued_at)
}

/// Issues a credential for an infrastructure service.
pub fn issue_service_credential(
    owner_id: &str,
    service: ServiceId,
    authority: &Authority,
    key: PublicKey,
    issued_at: u64,
) -> Result<Credential, CredentialError> {
    authority.sign(service.into(), owner_id, key, issued_at)
}

/// The configured set of trusted authority keys.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustRoots(pub BTreeMap<ServiceId, PublicKey>);

impl TrustRoots {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, authority: &Authority) {
        self.0.insert(authority.service_id(), authority.public_key());
    }

    pub fn get(&self, id: &ServiceId) -> Option<&PublicKey> {
        self.0.get(id)
    }
}

pub fn verify_credential(cred: &Credential, roots: &TrustRoots) -> Result<(), CredentialError> {
    if cred.owner_id.is_empty() {
        return Err(CredentialError::EmptyOwner);
    }
    let key = roots.get(&cred.authority).ok_or_else(|| CredentialError::UnknownAuthority(cred.authority.to_string()))?;
    verify_bytes(&key.0, &cred.signed_bytes(), &cred.authority_signature)
        .map_err(|_| CredentialError::BadAuthoritySignature)?;
    // An agent id must have been issued by the registry that owns its path.
    if let Principal::Agent(a) = &cred.agent {
        if a.registry_path().registry_service() != cred.authority {
            return Err(CredentialError::OutOfScope {
                authority: cred.authority.to_string(),
                subject: a.to_string(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::a3ap::sign::derive_key;

    fn eu() -> Authority {
        Authority::new("root/eu".parse().unwrap(), derive_key(1, "registry-eu"))
    }

    #[test]
    fn issued_id_composes_authority_path() {
        let agent_key = PublicKey(derive_key(1, "booking").verifying_key());
        let cred = issue_credential("org:acme", "booking-1", &eu(), agent_key, 0).unwrap();
        assert_eq!(cred.agent.to_string(), "acp://root/eu/booking-1");
        let mut roots = TrustRoots::new();
        roots.add(&eu());
        verify_credential(&cred, &roots).unwrap();
    }

    #[test]
    fn empty_owner_is_rejected() {
        let agent_key = PublicKey(derive_key(1, "booking").verifying_key());
        assert_eq!(issue_credential("", "booking-1", &eu(), agent_key, 0), Err(CredentialError::EmptyOwner));
        assert!(matches!(
            issue_credential("o", "Bad Name", &eu(), agent_key, 0),
            Err(CredentialError::BadName(_))
        ));
    }

    #[test]
    fn self_signed_forgery_fails() {
        let mut roots = TrustRoots::new();
        roots.add(&eu());
        let agent_key = derive_key(1, "mallory");
        let fake = Authority::new("root/eu".parse().unwrap(), agent_key.clone());
        let cred = issue_credential("org:evil", "mallory", &fake, PublicKey(agent_key.verifying_key()), 0).unwrap();
        assert_eq!(verify_credential(&cred, &roots), Err(CredentialError::BadAuthoritySignature));
        let mut tampered = issue_credential("org:acme", "booking-1", &eu(), PublicKey(agent_key.verifying_key()), 0).unwrap();
        tampered.owner_id = "org:other".into();
        assert_eq!(verify_credential(&tampered, &roots), Err(CredentialError::BadAuthoritySignature));
    }

    #[test]
    fn authority_scope_is_enforced() {
        let mut roots = TrustRoots::new();
        let us = Authority::new("root/us".parse().unwrap(), derive_key(1, "registry-us"));
        roots.add(&eu());
        roots.add(&us);
        let k = PublicKey(derive_key(1, "x").verifying_key());
        let mut cred = issue_credential("o", "x", &us, k, 0).unwrap();
        verify_credential(&cred, &roots).unwrap();
        // re-sign an eu id with the us key
        cred.agent = "acp://root/eu/x".parse().unwrap();
        cred.authority_signature = sign_bytes(&us.key, &cred.signed_bytes());
        assert!(matches!(verify_credential(&cred, &roots), Err(CredentialError::OutOfScope { .. })));
    }
}
