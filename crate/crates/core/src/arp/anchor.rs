//! Append-only hash chain over registry state changes.
//!
//! `head_k = SHA-256(head_{k-1} || record_hash_k)`, with `head_0` the hash of
//! the empty string. Hashes are stored as lowercase hex and chained over
//! their raw bytes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::a3ap::sign::strict_hex;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorEntry {
    pub seq: u64,
    pub record_hash: String,
    pub prev_head: String,
    pub head: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorLog {
    entries: Vec<AnchorEntry>,
}

pub fn genesis_head() -> String {
    hex::encode(Sha256::digest(b""))
}

fn chain(prev: &[u8; 32], record: &[u8; 32]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(prev);
    h.update(record);
    h.finalize().into()
}

impl AnchorLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Wraps entries read from storage. Use [`verify_anchor`] before trusting them.
    pub fn from_entries(entries: Vec<AnchorEntry>) -> Self {
        Self { entries }
    }

    pub fn entries(&self) -> &[AnchorEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn head(&self) -> String {
        self.entries.last().map(|e| e.head.clone()).unwrap_or_else(genesis_head)
    }

    pub fn append(&mut self, record_hash: [u8; 32]) -> &AnchorEntry {
        let prev_head = self.head();
        let prev = strict_hex::<32>(&prev_head).expect("stored heads are hex");
        let entry = AnchorEntry {
            seq: self.entries.len() as u64 + 1,
            record_hash: hex::encode(record_hash),
            prev_head,
            head: hex::encode(chain(&prev, &record_hash)),
        };
        self.entries.push(entry);
        self.entries.last().expect("just pushed")
    }
}

/// Recomputes the chain from genesis; true iff every entry is consistent.
pub fn verify_anchor(log: &AnchorLog) -> bool {
    let mut prev = genesis_head();
    for (i, e) in log.entries.iter().enumerate() {
        if e.seq != i as u64 + 1 || e.prev_head != prev {
            return false;
        }
        let (Some(p), Some(r)) = (strict_hex::<32>(&e.prev_head), strict_hex::<32>(&e.record_hash)) else {
            return false;
        };
        if hex::encode(chain(&p, &r)) != e.head {
            return false;
        }
        prev = e.head.clone();
    }
    true
}
