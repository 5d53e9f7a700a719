//! The record of one run: every delivered envelope, every actor note, the
//! registries' anchor logs and the usage ledger, sealed with a hash.

use std::collections::BTreeMap;

use acp_core::a3ap::{Amount, BillingPolicy, LedgerSnapshot, PublicKey};
use acp_core::arp::AnchorEntry;
use acp_core::envelope::{Envelope, Protocol};
use acp_core::id::Principal;
use acp_core::transport::{BusEvent, LogEntry, Note};
use acp_core::value::{to_canonical, Map, Value};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub scenario: String,
    pub seed: u64,
    pub transport: String,
    /// Sim steps taken; zero on sockets.
    pub steps: u64,
    pub events: Vec<BusEvent>,
    pub log: Vec<LogEntry>,
    /// Verification keys of every principal in the deployment.
    pub keys: BTreeMap<Principal, PublicKey>,
    /// Anchor log of each registry service.
    pub anchors: BTreeMap<Principal, Vec<AnchorEntry>>,
    pub ledger: LedgerSnapshot,
    pub billing: BillingPolicy,
    /// What each payer owes according to the live ledger.
    pub invoices: BTreeMap<Principal, Amount>,
    /// The personal agent; phase markers and transitions are read from its notes.
    pub leader: Principal,
    pub report: Option<Map>,
    #[serde(default)]
    pub transcript_hash: String,
}

impl Transcript {
    /// SHA-256 over the canonical encoding of everything but the hash itself.
    pub fn compute_hash(&self) -> String {
        let mut body = self.clone();
        body.transcript_hash = String::new();
        let bytes = to_canonical(&body).expect("transcripts encode canonically");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn seal(mut self) -> Self {
        self.transcript_hash = self.compute_hash();
        self
    }

    pub fn envelopes(&self, protocol: Protocol) -> Vec<Envelope> {
        self.events.iter().filter(|e| e.envelope.protocol == protocol).map(|e| e.envelope.clone()).collect()
    }

    /// Phase markers recorded by the personal agent, in log order.
    pub fn phases(&self) -> Vec<u8> {
        self.log
            .iter()
            .filter(|l| l.actor == self.leader)
            .filter_map(|l| match l.note {
                Note::Phase { phase } => Some(phase),
                _ => None,
            })
            .collect()
    }

    pub fn completed(&self) -> bool {
        self.report.as_ref().and_then(|r| r.get("ok")).and_then(Value::as_bool) == Some(true)
    }

    /// The output of one sub-goal in the final report.
    pub fn result(&self, sub_goal: &str) -> Option<&Value> {
        let results = self.report.as_ref()?.get("results")?.as_list()?;
        results
            .iter()
            .filter_map(Value::as_map)
            .find(|r| r.get("sub_goal").and_then(Value::as_str) == Some(sub_goal))
            .and_then(|r| r.get("output"))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("transcripts encode")
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }
}
