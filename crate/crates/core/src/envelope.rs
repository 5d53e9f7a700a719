//! The signed message envelope that wraps every protocol exchange, and the
//! closed catalog of message types each protocol may carry.

use std::fmt;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::id::Principal;
use crate::value::{self, DecodeError, EncodeError, Map, Value};

pub const PROTOCOL_VERSION: &str = "1.0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Protocol {
    Arp,
    Adp,
    Aip,
    Atp,
    A3ap,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Arp => "ARP",
            Protocol::Adp => "ADP",
            Protocol::Aip => "AIP",
            Protocol::Atp => "ATP",
            Protocol::A3ap => "A3AP",
        })
    }
}

/// Whether a message type opens an exchange, answers one, or may do either.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    /// Never carries a correlation id.
    Request,
    /// Always carries the correlation id of the request it answers.
    Response,
    /// Correlation id optional.
    Notice,
}

const CATALOG: &[(Protocol, &str, MessageKind)] = {
    use MessageKind::*;
    use Protocol::*;
    &[
        (Arp, "register_request", Request),
        (Arp, "register_result", Response),
        (Arp, "update_request", Request),
        (Arp, "deregister_request", Request),
        (Arp, "resolve_request", Request),
        (Arp, "resolve_result", Response),
        (Arp, "capability_event", Notice),
        (Adp, "discover_request", Request),
        (Adp, "discover_result", Response),
        (Adp, "capability_event", Notice),
        (Adp, "sync_request", Request),
        (Adp, "sync_snapshot", Response),
        (Aip, "group_invite", Request),
        (Aip, "group_accept", Response),
        (Aip, "group_decline", Response),
        (Aip, "subtask_assign", Request),
        (Aip, "subtask_accept", Response),
        (Aip, "subtask_reject", Response),
        (Aip, "subtask_start", Notice),
        (Aip, "negotiate", Notice),
        (Aip, "user_prompt", Request),
        (Aip, "user_reply", Response),
        (Aip, "subtask_result", Notice),
        (Aip, "task_report", Notice),
        (Atp, "tool_register", Request),
        (Atp, "tool_lookup", Request),
        (Atp, "tool_invoke", Request),
        (Atp, "tool_result", Response),
        (Atp, "resource_attach", Request),
        (Atp, "workflow_submit", Request),
        (Atp, "workflow_status", Response),
        (A3ap, "hello", Request),
        (A3ap, "auth_response", Response),
        (A3ap, "auth_confirm", Response),
        (A3ap, "auth_established", Response),
        (A3ap, "usage_report", Notice),
    ]
};

/// Looks up a `(protocol, msg_type)` pair in the message catalog.
pub fn message_kind(protocol: Protocol, msg_type: &str) -> Option<MessageKind> {
    CATALOG.iter().find(|(p, t, _)| *p == protocol && *t == msg_type).map(|(_, _, k)| *k)
}

/// All catalog entries for one protocol.
pub fn catalog(protocol: Protocol) -> impl Iterator<Item = &'static str> {
    CATALOG.iter().filter(move |(p, _, _)| *p == protocol).map(|(_, t, _)| *t)
}

/// 128-bit message identifier, written as 32 lowercase hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MsgId(pub u128);

impl fmt::Display for MsgId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl FromStr for MsgId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s.len() != 32 || !s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
            return Err(format!("not a 32-digit lowercase hex id: {s:?}"));
        }
        u128::from_str_radix(s, 16).map(MsgId).map_err(|e| e.to_string())
    }
}

impl Serialize for MsgId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MsgId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Source of message ids and nonces: seeded in simulation, OS entropy live.
pub struct IdSource {
    rng: Box<dyn RngCore + Send>,
}

impl IdSource {
    pub fn seeded(seed: u64) -> Self {
        Self { rng: Box::new(ChaCha20Rng::seed_from_u64(seed)) }
    }

    pub fn random() -> Self {
        Self { rng: Box::new(ChaCha20Rng::from_entropy()) }
    }

    pub fn msg_id(&mut self) -> MsgId {
        let mut b = [0u8; 16];
        self.rng.fill_bytes(&mut b);
        MsgId(u128::from_be_bytes(b))
    }

    pub fn bytes32(&mut self) -> [u8; 32] {
        let mut b = [0u8; 32];
        self.rng.fill_bytes(&mut b);
        b
    }
}

impl fmt::Debug for IdSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("IdSource")
    }
}

#[derive(Debug, Error)]
pub enum EnvelopeError {
    #[error("({0}, {1}) is not in the message catalog")]
    UnknownMessage(Protocol, String),
    #[error("unsupported protocol version {0:?}")]
    BadVersion(String),
    #[error("request {0} must not carry a correlation id")]
    UnexpectedCorrelation(String),
    #[error("response {0} must carry a correlation id")]
    MissingCorrelation(String),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub protocol: Protocol,
    pub version: String,
    pub msg_type: String,
    pub msg_id: MsgId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correlation_id: Option<MsgId>,
    pub sender: Principal,
    pub recipient: Principal,
    pub timestamp: u64,
    pub payload: Map,
    /// Detached signature, lowercase hex; empty until signed.
    #[serde(default)]
    pub signature: String,
}

impl Envelope {
    /// Builds an unsigned envelope. `correlation_id` must match the catalog
    /// kind of `msg_type`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        protocol: Protocol,
        msg_type: &str,
        msg_id: MsgId,
        correlation_id: Option<MsgId>,
        sender: Principal,
        recipient: Principal,
        timestamp: u64,
        payload: Map,
    ) -> Result<Self, EnvelopeError> {
        let env = Self {
            protocol,
            version: PROTOCOL_VERSION.to_string(),
            msg_type: msg_type.to_string(),
            msg_id,
            correlation_id,
            sender,
            recipient,
            timestamp,
            payload,
            signature: String::new(),
        };
        env.check()?;
        Ok(env)
    }

    /// Checks catalog membership, version and the correlation rule.
    pub fn check(&self) -> Result<(), EnvelopeError> {
        if self.version != PROTOCOL_VERSION {
            return Err(EnvelopeError::BadVersion(self.version.clone()));
        }
        let kind = message_kind(self.protocol, &self.msg_type)
            .ok_or_else(|| EnvelopeError::UnknownMessage(self.protocol, self.msg_type.clone()))?;
        match (kind, self.correlation_id) {
            (MessageKind::Request, Some(_)) => Err(EnvelopeError::UnexpectedCorrelation(self.msg_type.clone())),
            (MessageKind::Response, None) => Err(EnvelopeError::MissingCorrelation(self.msg_type.clone())),
            _ => Ok(()),
        }
    }

    pub fn is_signed(&self) -> bool {
        !self.signature.is_empty()
    }

    /// Canonical bytes of every field except `signature`; this is what gets signed.
    pub fn signing_bytes(&self) -> Result<Vec<u8>, EncodeError> {
        let mut v = value::to_value(self)?;
        if let Value::Map(m) = &mut v {
            m.remove("signature");
        }
        value::canonical_encode(&v)
    }

    /// Canonical wire bytes, signature included.
    pub fn to_bytes(&self) -> Result<Vec<u8>, EncodeError> {
        value::to_canonical(self)
    }

    /// Parses wire bytes. Rejects anything that is not byte-identical to the
    /// canonical encoding of the parsed envelope.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EnvelopeError> {
        let v = value::parse_canonical_strict(bytes)?;
        let env: Envelope = value::from_value(&v)?;
        if env.to_bytes()? != bytes {
            return Err(DecodeError::NotCanonical.into());
        }
        env.check()?;
        Ok(env)
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.payload.get(key)
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.payload.get(key).and_then(Value::as_str)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::id::ServiceId;
    use crate::map;

    fn principal(s: &str) -> Principal {
        s.parse().unwrap()
    }

    fn sample(ids: &mut IdSource) -> Envelope {
        Envelope::new(
            Protocol::Adp,
            "discover_request",
            ids.msg_id(),
            None,
            principal("acp://root/home/p-agent"),
            ServiceId::new(&["discovery", "main"]).unwrap().into(),
            7,
            map! { "query" => map! { "required_tags" => vec![Value::from("restaurant.search")] } },
        )
        .unwrap()
    }

    #[test]
    fn seeded_ids_are_reproducible() {
        let a: Vec<_> = (0..4).map({
            let mut s = IdSource::seeded(9);
            move |_| s.msg_id()
        }).collect();
        let mut s = IdSource::seeded(9);
        let b: Vec<_> = (0..4).map(|_| s.msg_id()).collect();
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn correlation_rules() {
        let mut ids = IdSource::seeded(1);
        let req = sample(&mut ids);
        let resp = Envelope::new(
            Protocol::Adp,
            "discover_result",
            ids.msg_id(),
            None,
            req.recipient.clone(),
            req.sender.clone(),
            8,
            Map::new(),
        );
        assert!(matches!(resp, Err(EnvelopeError::MissingCorrelation(_))));
        let bad = Envelope::new(
            Protocol::Adp,
            "discover_request",
            ids.msg_id(),
            Some(req.msg_id),
            req.sender.clone(),
            req.recipient.clone(),
            8,
            Map::new(),
        );
        assert!(matches!(bad, Err(EnvelopeError::UnexpectedCorrelation(_))));
        let unknown = Envelope::new(Protocol::Arp, "discover_request", ids.msg_id(), None, req.sender.clone(), req.recipient.clone(), 8, Map::new());
        assert!(matches!(unknown, Err(EnvelopeError::UnknownMessage(..))));
    }

    #[test]
    fn wire_round_trip_and_strictness() {
        let mut ids = IdSource::seeded(1);
        let env = sample(&mut ids);
        let bytes = env.to_bytes().unwrap();
        assert_eq!(Envelope::from_bytes(&bytes).unwrap(), env);
        let mut spaced = bytes.clone();
        spaced.insert(1, b' ');
        assert!(Envelope::from_bytes(&spaced).is_err());
        let upper = String::from_utf8(bytes).unwrap().replacen(&env.msg_id.to_string(), &env.msg_id.to_string().to_uppercase(), 1);
        assert!(Envelope::from_bytes(upper.as_bytes()).is_err());
    }

    #[test]
    fn signing_bytes_exclude_signature() {
        let mut ids = IdSource::seeded(1);
        let mut env = sample(&mut ids);
        let before = env.signing_bytes().unwrap();
        env.signature = "ab".into();
        assert_eq!(env.signing_bytes().unwrap(), before);
        assert!(!String::from_utf8(before).unwrap().contains("signature"));
    }
}
