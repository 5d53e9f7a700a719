//! Ed25519 keys, envelope signing and verification.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, RwLock};

use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::credential::Credential;
use crate::envelope::{Envelope, EnvelopeError, MsgId, Protocol};
use crate::id::Principal;
use crate::transport::ActorCtx;
use crate::value::Map;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SignError {
    #[error("envelope is already signed")]
    AlreadySigned,
    #[error("envelope cannot be encoded: {0}")]
    Encode(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VerifyError {
    #[error("envelope carries no signature")]
    Unsigned,
    #[error("signature is not 128 lowercase hex digits")]
    MalformedSignature,
    #[error("signature does not verify")]
    BadSignature,
    #[error("no key known for {0}")]
    UnknownSigner(String),
    #[error("envelope cannot be encoded: {0}")]
    Encode(String),
}

/// Ed25519 public key, serialized as 64 lowercase hex digits.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PublicKey(pub VerifyingKey);

impl PublicKey {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0.as_bytes())
    }

    pub fn from_hex(s: &str) -> Result<Self, String> {
        let bytes = strict_hex::<32>(s).ok_or_else(|| format!("not a 32-byte lowercase hex key: {s:?}"))?;
        VerifyingKey::from_bytes(&bytes).map(PublicKey).map_err(|e| e.to_string())
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", &self.to_hex()[..16])
    }
}

impl Serialize for PublicKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for PublicKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        PublicKey::from_hex(&String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// Decodes exactly `N` bytes of lowercase hex; uppercase is rejected so every
/// byte string has one textual form.
pub fn strict_hex<const N: usize>(s: &str) -> Option<[u8; N]> {
    if s.len() != 2 * N || !s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
        return None;
    }
    let mut out = [0u8; N];
    hex::decode_to_slice(s, &mut out).ok()?;
    Some(out)
}

/// Deterministic key derivation for simulations: SHA-256(seed || label).
pub fn derive_key(seed: u64, label: &str) -> SigningKey {
    let mut h = Sha256::new();
    h.update(b"acp/keygen/1");
    h.update(seed.to_be_bytes());
    h.update(label.as_bytes());
    SigningKey::from_bytes(&h.finalize().into())
}

pub fn sign_bytes(key: &SigningKey, msg: &[u8]) -> String {
    hex::encode(key.sign(msg).to_bytes())
}

pub fn verify_bytes(key: &VerifyingKey, msg: &[u8], sig_hex: &str) -> Result<(), VerifyError> {
    let raw = strict_hex::<64>(sig_hex).ok_or(VerifyError::MalformedSignature)?;
    key.verify_strict(msg, &Signature::from_bytes(&raw)).map_err(|_| VerifyError::BadSignature)
}

/// Signs the canonical encoding of every envelope field except the signature.
pub fn sign_envelope(mut env: Envelope, key: &SigningKey) -> Result<Envelope, SignError> {
    if env.is_signed() {
        return Err(SignError::AlreadySigned);
    }
    let bytes = env.signing_bytes().map_err(|e| SignError::Encode(e.to_string()))?;
    env.signature = sign_bytes(key, &bytes);
    Ok(env)
}

pub fn verify_envelope(env: &Envelope, key: &VerifyingKey) -> Result<(), VerifyError> {
    if !env.is_signed() {
        return Err(VerifyError::Unsigned);
    }
    let bytes = env.signing_bytes().map_err(|e| VerifyError::Encode(e.to_string()))?;
    verify_bytes(key, &bytes, &env.signature)
}

/// Parses wire bytes and verifies the signature in one step.
pub fn decode_and_verify(bytes: &[u8], key: &VerifyingKey) -> Result<Envelope, VerifyError> {
    let env = Envelope::from_bytes(bytes).map_err(|_| VerifyError::BadSignature)?;
    verify_envelope(&env, key)?;
    Ok(env)
}

/// Public keys of known principals, shared between the actors of one process.
#[derive(Clone, Default, Debug)]
pub struct KeyRing {
    keys: Arc<RwLock<BTreeMap<Principal, PublicKey>>>,
}

impl KeyRing {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, who: Principal, key: PublicKey) {
        self.keys.write().expect("keyring poisoned").insert(who, key);
    }

    pub fn get(&self, who: &Principal) -> Option<PublicKey> {
        self.keys.read().expect("keyring poisoned").get(who).copied()
    }

    pub fn verify(&self, env: &Envelope) -> Result<(), VerifyError> {
        let key = self.get(&env.sender).ok_or_else(|| VerifyError::UnknownSigner(env.sender.to_string()))?;
        verify_envelope(env, &key.0)
    }

    pub fn snapshot(&self) -> BTreeMap<Principal, PublicKey> {
        self.keys.read().expect("keyring poisoned").clone()
    }
}

/// A principal together with its signing key and (once issued) credential.
#[derive(Clone)]
pub struct Identity {
    pub principal: Principal,
    pub key: SigningKey,
    pub credential: Option<Credential>,
}

impl fmt::Debug for Identity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Identity").field("principal", &self.principal).finish_non_exhaustive()
    }
}

impl Identity {
    pub fn new(principal: impl Into<Principal>, key: SigningKey) -> Self {
        Self { principal: principal.into(), key, credential: None }
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey(self.key.verifying_key())
    }

    /// Builds and signs an envelope from this identity.
    pub fn envelope(
        &self,
        ctx: &mut ActorCtx,
        protocol: Protocol,
        msg_type: &str,
        to: &Principal,
        correlation: Option<MsgId>,
        payload: Map,
    ) -> Result<Envelope, EnvelopeError> {
        let env = Envelope::new(
            protocol,
            msg_type,
            ctx.fresh_id(),
            correlation,
            self.principal.clone(),
            to.clone(),
            ctx.now(),
            payload,
        )?;
        Ok(sign_envelope(env, &self.key).expect("fresh envelope is unsigned"))
    }

    /// Signs and queues a request; returns its message id.
    pub fn request(&self, ctx: &mut ActorCtx, protocol: Protocol, msg_type: &str, to: &Principal, payload: Map) -> MsgId {
        let env = self.envelope(ctx, protocol, msg_type, to, None, payload).expect("catalog request");
        let id = env.msg_id;
        ctx.send(env);
        id
    }

    /// Signs and queues a response to `req`, addressed to its sender.
    pub fn reply(&self, ctx: &mut ActorCtx, req: &Envelope, msg_type: &str, payload: Map) -> MsgId {
        let env = self
            .envelope(ctx, req.protocol, msg_type, &req.sender, Some(req.msg_id), payload)
            .expect("catalog response");
        let id = env.msg_id;
        ctx.send(env);
        id
    }

    /// Signs and queues a notice, optionally correlated to an earlier message.
    pub fn notice(
        &self,
        ctx: &mut ActorCtx,
        protocol: Protocol,
        msg_type: &str,
        to: &Principal,
        correlation: Option<MsgId>,
        payload: Map,
    ) -> MsgId {
        let env = self.envelope(ctx, protocol, msg_type, to, correlation, payload).expect("catalog notice");
        let id = env.msg_id;
        ctx.send(env);
        id
    }
}
