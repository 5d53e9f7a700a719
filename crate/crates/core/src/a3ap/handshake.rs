//! Four-message mutual authentication.
//!
//! ```text
//!   A                                                   B
//!   │ hello { credential_A, nonce_A }                   │
//!   │ ────────────────────────────────────────────────► │
//!   │    auth_response { credential_B, nonce_B,         │
//!   │                    proof = Sign_B(nonce_A) }      │
//!   │ ◄──────────────────────────────────────────────── │
//!   │ auth_confirm { proof = Sign_A(nonce_B) }          │
//!   │ ────────────────────────────────────────────────► │
//!   │                  auth_established { session_id }  │
//!   │ ◄──────────────────────────────────────────────── │
//! ```
//!
//! Both sides hash the four signed envelopes into the same transcript hash.
//! A session exists on a side only once the peer's proof has verified.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::credential::{verify_credential, Credential, CredentialError};
use super::sign::{sign_bytes, strict_hex, verify_bytes, verify_envelope, Identity, PublicKey};
use crate::envelope::{Envelope, IdSource, MsgId, Protocol};
use crate::id::Principal;
use crate::map;
use crate::transport::ActorCtx;
use crate::value::{from_value, to_value, Value};

const RESPONSE_LABEL: &[u8] = b"acp/a3ap/1/response";
const CONFIRM_LABEL: &[u8] = b"acp/a3ap/1/confirm";
const SESSION_LABEL: &[u8] = b"acp/a3ap/1/session";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AuthError {
    #[error("peer credential rejected: {0}")]
    BadCredential(CredentialError),
    #[error("peer proof over our nonce does not verify")]
    BadProof,
    #[error("envelope signature does not verify")]
    BadSignature,
    #[error("no reply within the handshake timeout")]
    Timeout,
    #[error("malformed handshake message: {0}")]
    Malformed(String),
    #[error("message from unexpected party {0}")]
    WrongPeer(String),
    #[error("local identity has no credential")]
    NoCredential,
}

/// 128-bit session identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub MsgId);

impl std::fmt::Display for SessionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: SessionId,
    /// Initiator.
    pub peer_a: Principal,
    /// Responder.
    pub peer_b: Principal,
    pub established_at: u64,
    pub transcript_hash: String,
}

impl Session {
    pub fn involves(&self, p: &Principal) -> bool {
        &self.peer_a == p || &self.peer_b == p
    }

    pub fn other(&self, me: &Principal) -> &Principal {
        if &self.peer_a == me {
            &self.peer_b
        } else {
            &self.peer_a
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Hello {
    credential: Credential,
    nonce: String,
}

#[derive(Serialize, Deserialize)]
struct AuthResponse {
    credential: Credential,
    nonce: String,
    proof: String,
}

fn payload<T: Serialize>(t: &T) -> crate::value::Map {
    match to_value(t).expect("handshake payload encodes") {
        Value::Map(m) => m,
        _ => unreachable!("structs encode as maps"),
    }
}

fn parse<T: serde::de::DeserializeOwned>(env: &Envelope) -> Result<T, AuthError> {
    from_value(&Value::Map(env.payload.clone())).map_err(|e| AuthError::Malformed(e.to_string()))
}

fn nonce_bytes(s: &str) -> Result<[u8; 32], AuthError> {
    strict_hex::<32>(s).ok_or_else(|| AuthError::Malformed("nonce".into()))
}

fn labelled(label: &[u8], nonce: &[u8; 32]) -> Vec<u8> {
    [label, nonce.as_slice()].concat()
}

fn transcript_hash(parts: &[&Envelope]) -> String {
    let mut h = Sha256::new();
    for env in parts {
        let bytes = env.to_bytes().expect("signed envelope encodes");
        h.update((bytes.len() as u64).to_be_bytes());
        h.update(&bytes);
    }
    hex::encode(h.finalize())
}

fn session_id(nonce_a: &[u8; 32], nonce_b: &[u8; 32]) -> SessionId {
    let mut h = Sha256::new();
    h.update(SESSION_LABEL);
    h.update(nonce_a);
    h.update(nonce_b);
    let d = h.finalize();
    SessionId(MsgId(u128::from_be_bytes(d[..16].try_into().expect("16 bytes"))))
}

fn check_peer_credential(env: &Envelope, cred: &Credential, roots: &super::credential::TrustRoots) -> Result<(), AuthError> {
    verify_credential(cred, roots).map_err(AuthError::BadCredential)?;
    if cred.agent != env.sender {
        return Err(AuthError::WrongPeer(env.sender.to_string()));
    }
    verify_envelope(env, &cred.public_key.0).map_err(|_| AuthError::BadSignature)
}

/// Initiating side of one handshake.
#[derive(Debug)]
pub struct Initiator {
    peer: Principal,
    nonce: [u8; 32],
    started_at: u64,
    hello: Envelope,
    response: Option<(Envelope, PublicKey)>,
    confirm: Option<Envelope>,
}

impl Initiator {
    /// Queues `hello` for `peer`.
    pub fn start(me: &Identity, peer: &Principal, ctx: &mut ActorCtx) -> Result<Self, AuthError> {
        let credential = me.credential.clone().ok_or(AuthError::NoCredential)?;
        let nonce = ctx.random32();
        let body = Hello { credential, nonce: hex::encode(nonce) };
        let hello = me
            .envelope(ctx, Protocol::A3ap, "hello", peer, None, payload(&body))
            .expect("catalog message");
        ctx.send(hello.clone());
        Ok(Self { peer: peer.clone(), nonce, started_at: ctx.now(), hello, response: None, confirm: None })
    }

    pub fn hello_id(&self) -> MsgId {
        self.hello.msg_id
    }

    pub fn peer(&self) -> &Principal {
        &self.peer
    }

    pub fn expired(&self, now: u64, timeout: u64) -> bool {
        now.saturating_sub(self.started_at) > timeout
    }

    /// Verifies the responder's credential and proof, then queues `auth_confirm`.
    pub fn on_response(
        &mut self,
        me: &Identity,
        env: &Envelope,
        roots: &super::credential::TrustRoots,
        ctx: &mut ActorCtx,
    ) -> Result<MsgId, AuthError> {
        if env.sender != self.peer {
            return Err(AuthError::WrongPeer(env.sender.to_string()));
        }
        let body: AuthResponse = parse(env)?;
        check_peer_credential(env, &body.credential, roots)?;
        verify_bytes(&body.credential.public_key.0, &labelled(RESPONSE_LABEL, &self.nonce), &body.proof)
            .map_err(|_| AuthError::BadProof)?;
        let nonce_b = nonce_bytes(&body.nonce)?;
        let proof = sign_bytes(&me.key, &labelled(CONFIRM_LABEL, &nonce_b));
        let confirm = me
            .envelope(ctx, Protocol::A3ap, "auth_confirm", &self.peer, Some(env.msg_id), map! { "proof" => proof })
            .expect("catalog message");
        ctx.send(confirm.clone());
        let id = confirm.msg_id;
        self.response = Some((env.clone(), body.credential.public_key));
        self.confirm = Some(confirm);
        Ok(id)
    }

    pub fn on_established(self, env: &Envelope, now: u64) -> Result<Session, AuthError> {
        let (response, peer_key) = self.response.ok_or_else(|| AuthError::Malformed("out of order".into()))?;
        let confirm = self.confirm.ok_or_else(|| AuthError::Malformed("out of order".into()))?;
        if env.sender != self.peer {
            return Err(AuthError::WrongPeer(env.sender.to_string()));
        }
        verify_envelope(env, &peer_key.0).map_err(|_| AuthError::BadSignature)?;
        let body: AuthResponse = parse(&response)?;
        let nonce_b = nonce_bytes(&body.nonce)?;
        let expected = session_id(&self.nonce, &nonce_b);
        if env.get_str("session_id") != Some(expected.to_string().as_str()) {
            return Err(AuthError::Malformed("session id mismatch".into()));
        }
        Ok(Session {
            session_id: expected,
            peer_a: self.hello.sender.clone(),
            peer_b: self.peer,
            established_at: now,
            transcript_hash: transcript_hash(&[&self.hello, &response, &confirm, env]),
        })
    }
}

/// Responding side of one handshake.
#[derive(Debug)]
pub struct Responder {
    peer: Principal,
    peer_key: PublicKey,
    nonce: [u8; 32],
    peer_nonce: [u8; 32],
    started_at: u64,
    hello: Envelope,
    response: Envelope,
}

impl Responder {
    /// Verifies `hello` and queues `auth_response`.
    pub fn on_hello(
        me: &Identity,
        env: &Envelope,
        roots: &super::credential::TrustRoots,
        ctx: &mut ActorCtx,
    ) -> Result<Self, AuthError> {
        let credential = me.credential.clone().ok_or(AuthError::NoCredential)?;
        let body: Hello = parse(env)?;
        check_peer_credential(env, &body.credential, roots)?;
        let peer_nonce = nonce_bytes(&body.nonce)?;
        let nonce = ctx.random32();
        let reply = AuthResponse {
            credential,
            nonce: hex::encode(nonce),
            proof: sign_bytes(&me.key, &labelled(RESPONSE_LABEL, &peer_nonce)),
        };
        let response = me
            .envelope(ctx, Protocol::A3ap, "auth_response", &env.sender, Some(env.msg_id), payload(&reply))
            .expect("catalog message");
        ctx.send(response.clone());
        Ok(Self {
            peer: env.sender.clone(),
            peer_key: body.credential.public_key,
            nonce,
            peer_nonce,
            started_at: ctx.now(),
            hello: env.clone(),
            response,
        })
    }

    pub fn response_id(&self) -> MsgId {
        self.response.msg_id
    }

    pub fn peer(&self) -> &Principal {
        &self.peer
    }

    pub fn expired(&self, now: u64, timeout: u64) -> bool {
        now.saturating_sub(self.started_at) > timeout
    }

    /// Verifies the initiator's proof; on success queues `auth_established`.
    pub fn on_confirm(self, me: &Identity, env: &Envelope, ctx: &mut ActorCtx) -> Result<Session, AuthError> {
        if env.sender != self.peer {
            return Err(AuthError::WrongPeer(env.sender.to_string()));
        }
        verify_envelope(env, &self.peer_key.0).map_err(|_| AuthError::BadSignature)?;
        let proof = env.get_str("proof").ok_or_else(|| AuthError::Malformed("proof".into()))?;
        verify_bytes(&self.peer_key.0, &labelled(CONFIRM_LABEL, &self.nonce), proof).map_err(|_| AuthError::BadProof)?;
        let sid = session_id(&self.peer_nonce, &self.nonce);
        let established = me
            .envelope(
                ctx,
                Protocol::A3ap,
                "auth_established",
                &self.peer,
                Some(env.msg_id),
                map! { "session_id" => sid.to_string() },
            )
            .expect("catalog message");
        ctx.send(established.clone());
        Ok(Session {
            session_id: sid,
            peer_a: self.peer,
            peer_b: me.principal.clone(),
            established_at: ctx.now(),
            transcript_hash: transcript_hash(&[&self.hello, &self.response, env, &established]),
        })
    }
}

/// Outcome surfaced by [`Handshakes::handle`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HandshakeEvent {
    Established(Session),
    Failed { peer: Principal, error: AuthError },
}

/// All handshakes of one actor, in either role, routed by correlation id.
#[derive(Debug)]
pub struct Handshakes {
    roots: super::credential::TrustRoots,
    timeout: u64,
    initiators: HashMap<MsgId, Initiator>,
    confirming: HashMap<MsgId, Initiator>,
    responders: HashMap<MsgId, Responder>,
    sessions: BTreeMap<Principal, Session>,
}

impl Handshakes {
    pub fn new(roots: super::credential::TrustRoots, timeout: u64) -> Self {
        Self {
            roots,
            timeout,
            initiators: HashMap::new(),
            confirming: HashMap::new(),
            responders: HashMap::new(),
            sessions: BTreeMap::new(),
        }
    }

    pub fn roots(&self) -> &super::credential::TrustRoots {
        &self.roots
    }

    pub fn initiate(&mut self, me: &Identity, peer: &Principal, ctx: &mut ActorCtx) -> Result<MsgId, AuthError> {
        let init = Initiator::start(me, peer, ctx)?;
        let id = init.hello_id();
        self.initiators.insert(id, init);
        Ok(id)
    }

    pub fn session_with(&self, peer: &Principal) -> Option<&Session> {
        self.sessions.get(peer)
    }

    pub fn sessions(&self) -> impl Iterator<Item = &Session> {
        self.sessions.values()
    }

    pub fn pending(&self) -> bool {
        !(self.initiators.is_empty() && self.confirming.is_empty() && self.responders.is_empty())
    }

    /// Handles an A3AP handshake message. Returns `None` for messages that only
    /// advance a handshake without completing or failing it.
    pub fn handle(&mut self, me: &Identity, env: &Envelope, ctx: &mut ActorCtx) -> Option<HandshakeEvent> {
        let fail = |peer: &Principal, error| Some(HandshakeEvent::Failed { peer: peer.clone(), error });
        match env.msg_type.as_str() {
            "hello" => match Responder::on_hello(me, env, &self.roots, ctx) {
                Ok(r) => {
                    self.responders.insert(r.response_id(), r);
                    None
                }
                Err(e) => fail(&env.sender, e),
            },
            "auth_response" => {
                let mut init = self.initiators.remove(&env.correlation_id?)?;
                match init.on_response(me, env, &self.roots, ctx) {
                    Ok(confirm_id) => {
                        self.confirming.insert(confirm_id, init);
                        None
                    }
                    Err(e) => fail(init.peer(), e),
                }
            }
            "auth_confirm" => {
                let resp = self.responders.remove(&env.correlation_id?)?;
                let peer = resp.peer().clone();
                match resp.on_confirm(me, env, ctx) {
                    Ok(s) => {
                        self.sessions.insert(peer, s.clone());
                        Some(HandshakeEvent::Established(s))
                    }
                    Err(e) => fail(&peer, e),
                }
            }
            "auth_established" => {
                let init = self.confirming.remove(&env.correlation_id?)?;
                let peer = init.peer().clone();
                match init.on_established(env, ctx.now()) {
                    Ok(s) => {
                        self.sessions.insert(peer, s.clone());
                        Some(HandshakeEvent::Established(s))
                    }
                    Err(e) => fail(&peer, e),
                }
            }
            _ => None,
        }
    }

    /// Drops handshakes that have waited longer than the timeout.
    pub fn poll_timeouts(&mut self, now: u64) -> Vec<HandshakeEvent> {
        let timeout = self.timeout;
        let mut out = Vec::new();
        for table in [&mut self.initiators, &mut self.confirming] {
            let expired: Vec<_> = table.iter().filter(|(_, i)| i.expired(now, timeout)).map(|(k, _)| *k).collect();
            for k in expired {
                let i = table.remove(&k).expect("present");
                out.push(HandshakeEvent::Failed { peer: i.peer().clone(), error: AuthError::Timeout });
            }
        }
        let expired: Vec<_> = self.responders.iter().filter(|(_, r)| r.expired(now, timeout)).map(|(k, _)| *k).collect();
        for k in expired {
            let r = self.responders.remove(&k).expect("present");
            out.push(HandshakeEvent::Failed { peer: r.peer().clone(), error: AuthError::Timeout });
        }
        out.sort_by(|a, b| format!("{a:?}").cmp(&format!("{b:?}")));
        out
    }
}

/// Runs a complete in-memory handshake between two identities and returns
/// each side's session.
pub fn mutual_authenticate(
    initiator: &Identity,
    responder: &Identity,
    roots: &super::credential::TrustRoots,
    ids: &mut IdSource,
    now: u64,
) -> Result<(Session, Session), AuthError> {
    let mut ctx = ActorCtx::new(now, ids);
    let mut init = Initiator::start(initiator, &responder.principal, &mut ctx)?;
    let hello = ctx.take_outbox().pop().expect("hello queued");
    let resp = Responder::on_hello(responder, &hello, roots, &mut ctx)?;
    let response = ctx.take_outbox().pop().expect("response queued");
    init.on_response(initiator, &response, roots, &mut ctx)?;
    let confirm = ctx.take_outbox().pop().expect("confirm queued");
    let b = resp.on_confirm(responder, &confirm, &mut ctx)?;
    let established = ctx.take_outbox().pop().expect("established queued");
    let a = init.on_established(&established, now)?;
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::a3ap::credential::{issue_credential, Authority, TrustRoots};
    use crate::a3ap::sign::derive_key;

    fn setup() -> (Identity, Identity, TrustRoots, Authority) {
        let auth = Authority::new("root/eu".parse().unwrap(), derive_key(5, "reg"));
        let mut roots = TrustRoots::new();
        roots.add(&auth);
        let mk = |name: &str| {
            let key = derive_key(5, name);
            let cred = issue_credential("org:x", name, &auth, PublicKey(key.verifying_key()), 0).unwrap();
            let mut id = Identity::new(cred.agent.clone(), key);
            id.credential = Some(cred);
            id
        };
        (mk("alice"), mk("bob"), roots, auth)
    }

    #[test]
    fn both_sides_agree() {
        let (a, b, roots, _) = setup();
        let mut ids = IdSource::seeded(1);
        let (sa, sb) = mutual_authenticate(&a, &b, &roots, &mut ids, 10).unwrap();
        assert_eq!(sa.session_id, sb.session_id);
        assert_eq!(sa.transcript_hash, sb.transcript_hash);
        assert_eq!(sa.peer_a, a.principal);
        assert_eq!(sb.peer_b, b.principal);
    }

    #[test]
    fn forged_credential_is_rejected() {
        let (a, mut b, roots, _) = setup();
        let key = derive_key(5, "forger");
        let fake = Authority::new("root/eu".parse().unwrap(), key.clone());
        b.credential = Some(issue_credential("org:x", "bob", &fake, PublicKey(b.key.verifying_key()), 0).unwrap());
        let mut ids = IdSource::seeded(1);
        let err = mutual_authenticate(&a, &b, &roots, &mut ids, 0).unwrap_err();
        assert!(matches!(err, AuthError::BadCredential(CredentialError::BadAuthoritySignature)));
        let err = mutual_authenticate(&b, &a, &roots, &mut ids, 0).unwrap_err();
        assert!(matches!(err, AuthError::BadCredential(_)));
    }

    #[test]
    fn replayed_proof_is_rejected_and_no_session_exists() {
        let (a, b, roots, _) = setup();
        let mut ids = IdSource::seeded(1);
        // first run: capture bob's response (proof over the old nonce)
        let mut ctx = ActorCtx::new(0, &mut ids);
        let _old = Initiator::start(&a, &b.principal, &mut ctx).unwrap();
        let old_hello = ctx.take_outbox().pop().unwrap();
        let _ = Responder::on_hello(&b, &old_hello, &roots, &mut ctx).unwrap();
        let old_response = ctx.take_outbox().pop().unwrap();

        // second run: bob replays the stale proof inside a freshly signed response
        let mut a_side = Handshakes::new(roots.clone(), 50);
        a_side.initiate(&a, &b.principal, &mut ctx).unwrap();
        let hello = ctx.take_outbox().pop().unwrap();
        let replay = b
            .envelope(&mut ctx, Protocol::A3ap, "auth_response", &a.principal, Some(hello.msg_id), old_response.payload.clone())
            .unwrap();
        let ev = a_side.handle(&a, &replay, &mut ctx);
        assert_eq!(ev, Some(HandshakeEvent::Failed { peer: b.principal.clone(), error: AuthError::BadProof }));
        assert!(a_side.session_with(&b.principal).is_none());
        assert!(ctx.take_outbox().is_empty(), "no confirm after a failed proof");
    }

    #[test]
    fn handshakes_table_times_out() {
        let (a, b, roots, _) = setup();
        let mut ids = IdSource::seeded(2);
        let mut ctx = ActorCtx::new(0, &mut ids);
        let mut table = Handshakes::new(roots, 50);
        table.initiate(&a, &b.principal, &mut ctx).unwrap();
        assert!(table.poll_timeouts(50).is_empty());
        let evs = table.poll_timeouts(51);
        assert_eq!(evs, vec![HandshakeEvent::Failed { peer: b.principal.clone(), error: AuthError::Timeout }]);
        assert!(!table.pending());
    }

    #[test]
    fn tables_on_both_sides_establish() {
        let (a, b, roots, _) = setup();
        let mut ids = IdSource::seeded(3);
        let mut ctx = ActorCtx::new(0, &mut ids);
        let (mut ta, mut tb) = (Handshakes::new(roots.clone(), 50), Handshakes::new(roots, 50));
        ta.initiate(&a, &b.principal, &mut ctx).unwrap();
        let mut events = Vec::new();
        for _ in 0..4 {
            for env in ctx.take_outbox() {
                let (table, me) = if env.recipient == a.principal { (&mut ta, &a) } else { (&mut tb, &b) };
                events.extend(table.handle(me, &env, &mut ctx));
            }
        }
        assert_eq!(events.len(), 2);
        assert_eq!(ta.session_with(&b.principal).unwrap().transcript_hash, tb.session_with(&a.principal).unwrap().transcript_hash);
    }
}
