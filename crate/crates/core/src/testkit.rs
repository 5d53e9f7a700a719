//! Deterministic identities for tests, examples and the bundled scenarios:
//! one authority per registry path, keys derived from a seed.

use std::collections::BTreeMap;

use crate::a3ap::credential::{issue_credential, issue_service_credential, Authority, TrustRoots};
use crate::a3ap::sign::{derive_key, Identity, KeyRing};
use crate::envelope::{Envelope, IdSource, MsgId, Protocol};
use crate::id::{Principal, RegistryPath, ServiceId};
use crate::transport::ActorCtx;
use crate::value::Map;

pub struct Org {
    seed: u64,
    owner: String,
    authorities: BTreeMap<RegistryPath, Authority>,
    roots: TrustRoots,
    keys: KeyRing,
    ids: IdSource,
}

impl Org {
    /// Creates one authority per registry path.
    pub fn new(seed: u64, registry_paths: &[&str]) -> Self {
        let mut org = Self {
            seed,
            owner: "org:example".into(),
            authorities: BTreeMap::new(),
            roots: TrustRoots::new(),
            keys: KeyRing::new(),
            ids: IdSource::seeded(seed ^ 0x5eed),
        };
        for p in registry_paths {
            org.add_registry(p.parse().expect("valid registry path"));
        }
        org
    }

    pub fn add_registry(&mut self, path: RegistryPath) -> &Authority {
        let auth = Authority::new(path.clone(), derive_key(self.seed, &format!("registry:{path}")));
        self.roots.add(&auth);
        self.keys.insert(auth.service_id().into(), auth.public_key());
        self.authorities.entry(path).or_insert(auth)
    }

    pub fn roots(&self) -> &TrustRoots {
        &self.roots
    }

    pub fn keyring(&self) -> &KeyRing {
        &self.keys
    }

    pub fn authority(&self, path: &RegistryPath) -> &Authority {
        &self.authorities[path]
    }

    /// An agent credentialed by the registry at `path`.
    pub fn agent(&self, path: &str, name: &str) -> Identity {
        let path: RegistryPath = path.parse().expect("valid registry path");
        let auth = &self.authorities[&path];
        let key = derive_key(self.seed, &format!("agent:{path}/{name}"));
        let cred = issue_credential(&self.owner, name, auth, crate::a3ap::PublicKey(key.verifying_key()), 0)
            .expect("valid agent name");
        let mut id = Identity::new(cred.agent.clone(), key);
        self.keys.insert(id.principal.clone(), id.public_key());
        id.credential = Some(cred);
        id
    }

    /// The registry service at `path`, signing with its authority key.
    pub fn registry(&self, path: &str) -> Identity {
        let path: RegistryPath = path.parse().expect("valid registry path");
        let auth = &self.authorities[&path];
        self.service_with_key(auth.service_id(), &path, auth.key.clone())
    }

    /// Any other infrastructure service, credentialed by the registry at `issuer`.
    pub fn service(&self, svc: &str, issuer: &str) -> Identity {
        let svc: ServiceId = svc.parse().expect("valid service id");
        let issuer: RegistryPath = issuer.parse().expect("valid registry path");
        let key = derive_key(self.seed, &format!("service:{svc}"));
        self.service_with_key(svc, &issuer, key)
    }

    fn service_with_key(&self, svc: ServiceId, issuer: &RegistryPath, key: ed25519_dalek::SigningKey) -> Identity {
        let auth = &self.authorities[issuer];
        let cred = issue_service_credential(&self.owner, svc.clone(), auth, crate::a3ap::PublicKey(key.verifying_key()), 0)
            .expect("non-empty owner");
        let mut id = Identity::new(svc, key);
        self.keys.insert(id.principal.clone(), id.public_key());
        id.credential = Some(cred);
        id
    }

    /// Builds and signs an envelope outside any actor.
    pub fn envelope(
        &mut self,
        from: &Identity,
        protocol: Protocol,
        msg_type: &str,
        to: &Principal,
        correlation: Option<MsgId>,
        payload: Map,
    ) -> Envelope {
        let mut ctx = ActorCtx::new(0, &mut self.ids);
        from.envelope(&mut ctx, protocol, msg_type, to, correlation, payload).expect("catalog message")
    }
}
