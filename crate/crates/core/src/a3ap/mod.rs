//! Authentication, authorization and accounting: credentials issued by
//! registry authorities, envelope signatures, mutual authentication and a
//! usage ledger.

pub mod credential;
pub mod handshake;
pub mod ledger;
pub mod sign;

pub use credential::{
    issue_credential, issue_service_credential, verify_credential, Authority, Credential, CredentialError, TrustRoots,
};
pub use handshake::{mutual_authenticate, AuthError, HandshakeEvent, Handshakes, Initiator, Responder, Session, SessionId};
pub use ledger::{Amount, BillingPolicy, Ledger, LedgerEntry, LedgerError, LedgerSnapshot, UnitKind};
pub use sign::{
    decode_and_verify, derive_key, sign_bytes, sign_envelope, verify_bytes, verify_envelope, Identity, KeyRing, PublicKey,
    SignError, VerifyError,
};
