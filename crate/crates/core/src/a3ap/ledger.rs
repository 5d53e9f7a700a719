//! Usage accounting. Callees meter their own work and append entries against
//! an established session; invoices are exact fixed-point sums.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use super::handshake::{Session, SessionId};
use crate::id::Principal;

const SCALE: u128 = 1_000_000;

/// Non-negative money amount with six fractional digits.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Amount {
    micros: u128,
}

impl Amount {
    pub const ZERO: Amount = Amount { micros: 0 };

    pub fn from_micros(micros: u128) -> Self {
        Self { micros }
    }

    pub fn micros(self) -> u128 {
        self.micros
    }

    pub fn times(self, n: u64) -> Amount {
        Amount { micros: self.micros * n as u128 }
    }
}

impl std::ops::Add for Amount {
    type Output = Amount;
    fn add(self, o: Amount) -> Amount {
        Amount { micros: self.micros + o.micros }
    }
}

impl std::iter::Sum for Amount {
    fn sum<I: Iterator<Item = Amount>>(it: I) -> Amount {
        it.fold(Amount::ZERO, |a, b| a + b)
    }
}

impl fmt::Display for Amount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:06}", self.micros / SCALE, self.micros % SCALE)
    }
}

impl FromStr for Amount {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("not a decimal amount with at most 6 fractional digits: {s:?}");
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if int.is_empty() || !int.bytes().all(|b| b.is_ascii_digit()) || frac.len() > 6 || !frac.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let whole: u128 = int.parse().map_err(|_| bad())?;
        let frac_micros: u128 = if frac.is_empty() { 0 } else { format!("{frac:0<6}").parse().map_err(|_| bad())? };
        Ok(Amount { micros: whole * SCALE + frac_micros })
    }
}

impl Serialize for Amount {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Amount {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BillingPolicy {
    pub price_per_token: Amount,
    pub price_per_call: Amount,
}

impl BillingPolicy {
    pub fn charge(&self, e: &LedgerEntry) -> Amount {
        match e.unit_kind {
            UnitKind::Tokens => self.price_per_token.times(e.units),
            UnitKind::Calls => self.price_per_call.times(e.units),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Tokens,
    Calls,
}

impl FromStr for UnitKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tokens" => Ok(UnitKind::Tokens),
            "calls" => Ok(UnitKind::Calls),
            _ => Err(format!("unknown unit kind {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub entry_id: u64,
    pub session_id: SessionId,
    pub payer: Principal,
    pub payee: Principal,
    pub units: u64,
    pub unit_kind: UnitKind,
    pub at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("no established session {0} between payer and payee")]
    NoSession(SessionId),
    #[error("usage of zero units")]
    ZeroUnits,
}

/// Serializable ledger contents, as written by `acp run` and read by `acp invoice`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub sessions: Vec<Session>,
    pub entries: Vec<LedgerEntry>,
}

impl LedgerSnapshot {
    pub fn invoice(&self, policy: &BillingPolicy, payer: &Principal) -> Amount {
        invoice_entries(&self.entries, policy, payer)
    }
}

fn invoice_entries(entries: &[LedgerEntry], policy: &BillingPolicy, payer: &Principal) -> Amount {
    entries.iter().filter(|e| &e.payer == payer).map(|e| policy.charge(e)).sum()
}

#[derive(Debug, Default)]
struct State {
    next_id: u64,
    sessions: BTreeMap<SessionId, Session>,
    entries: Vec<LedgerEntry>,
}

/// Append-only usage ledger shared by the parties that meter into it.
#[derive(Debug, Clone, Default)]
pub struct Ledger {
    state: Arc<Mutex<State>>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().expect("ledger poisoned")
    }

    /// Makes a session usable for metering.
    pub fn open_session(&self, s: &Session) {
        self.lock().sessions.insert(s.session_id, s.clone());
    }

    /// Appends one entry. Both parties must be the session's peers.
    pub fn record_usage(
        &self,
        session: SessionId,
        payer: &Principal,
        payee: &Principal,
        units: u64,
        unit_kind: UnitKind,
        at: u64,
    ) -> Result<LedgerEntry, LedgerError> {
        let mut st = self.lock();
        let s = st.sessions.get(&session).ok_or(LedgerError::NoSession(session))?;
        if !(s.involves(payer) && s.involves(payee) && payer != payee) {
            return Err(LedgerError::NoSession(session));
        }
        if units == 0 {
            return Err(LedgerError::ZeroUnits);
        }
        st.next_id += 1;
        let entry = LedgerEntry {
            entry_id: st.next_id,
            session_id: session,
            payer: payer.clone(),
            payee: payee.clone(),
            units,
            unit_kind,
            at,
        };
        st.entries.push(entry.clone());
        Ok(entry)
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        self.lock().entries.clone()
    }

    /// Units billed from `payer` to `payee` of one kind.
    pub fn total(&self, payer: &Principal, payee: &Principal, kind: UnitKind) -> u64 {
        self.lock()
            .entries
            .iter()
            .filter(|e| &e.payer == payer && &e.payee == payee && e.unit_kind == kind)
            .map(|e| e.units)
            .sum()
    }

    pub fn invoice(&self, policy: &BillingPolicy, payer: &Principal) -> Amount {
        invoice_entries(&self.lock().entries, policy, payer)
    }

    pub fn payers(&self) -> Vec<Principal> {
        let mut v: Vec<_> = self.lock().entries.iter().map(|e| e.payer.clone()).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        let st = self.lock();
        LedgerSnapshot { sessions: st.sessions.values().cloned().collect(), entries: st.entries.clone() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::MsgId;
    use proptest::prelude::*;

    fn session() -> Session {
        Session {
            session_id: SessionId(MsgId(7)),
            peer_a: "acp://r/p".parse().unwrap(),
            peer_b: "acp://r/w".parse().unwrap(),
            established_at: 0,
            transcript_hash: String::new(),
        }
    }

    fn policy(tok: &str, call: &str) -> BillingPolicy {
        BillingPolicy { price_per_token: tok.parse().unwrap(), price_per_call: call.parse().unwrap() }
    }

    #[test]
    fn amount_text() {
        assert_eq!("0.001".parse::<Amount>().unwrap().micros(), 1000);
        assert_eq!("12".parse::<Amount>().unwrap().to_string(), "12.000000");
        assert!("0.0000001".parse::<Amount>().is_err());
        assert!("-1".parse::<Amount>().is_err());
        assert!(".5".parse::<Amount>().is_err());
    }

    #[test]
    fn totals_ids_and_errors() {
        let l = Ledger::new();
        let s = session();
        assert_eq!(
            l.record_usage(s.session_id, &s.peer_a, &s.peer_b, 10, UnitKind::Tokens, 0),
            Err(LedgerError::NoSession(s.session_id))
        );
        l.open_session(&s);
        let ids: Vec<_> = (0..3)
            .map(|_| l.record_usage(s.session_id, &s.peer_a, &s.peer_b, 10, UnitKind::Tokens, 0).unwrap().entry_id)
            .collect();
        assert_eq!(ids, vec![1, 2, 3]);
        assert_eq!(l.total(&s.peer_a, &s.peer_b, UnitKind::Tokens), 30);
        assert_eq!(
            l.record_usage(s.session_id, &s.peer_a, &s.peer_b, 0, UnitKind::Tokens, 0),
            Err(LedgerError::ZeroUnits)
        );
        let outsider: Principal = "acp://r/x".parse().unwrap();
        assert!(l.record_usage(s.session_id, &outsider, &s.peer_b, 1, UnitKind::Calls, 0).is_err());
    }

    #[test]
    fn invoice_examples() {
        let l = Ledger::new();
        let s = session();
        assert_eq!(l.invoice(&policy("0.001", "0.01"), &s.peer_a), Amount::ZERO);
        l.open_session(&s);
        for _ in 0..3 {
            l.record_usage(s.session_id, &s.peer_a, &s.peer_b, 10, UnitKind::Tokens, 0).unwrap();
        }
        assert_eq!(l.invoice(&policy("0.001", "0.01"), &s.peer_a).to_string(), "0.030000");
        l.record_usage(s.session_id, &s.peer_a, &s.peer_b, 1, UnitKind::Calls, 0).unwrap();
        l.record_usage(s.session_id, &s.peer_a, &s.peer_b, 1, UnitKind::Calls, 0).unwrap();
        assert_eq!(l.invoice(&policy("0.001", "0.01"), &s.peer_a).to_string(), "0.050000");
        assert_eq!(l.snapshot().invoice(&policy("0.001", "0.01"), &s.peer_a).to_string(), "0.050000");
    }

    proptest! {
        #[test]
        fn conservation(usages in prop::collection::vec((any::<bool>(), 1u64..1000, any::<bool>()), 0..40),
                        tok in 0u128..10_000, call in 0u128..10_000) {
            let l = Ledger::new();
            let s = session();
            l.open_session(&s);
            let p = BillingPolicy { price_per_token: Amount::from_micros(tok), price_per_call: Amount::from_micros(call) };
            let mut expected = 0u128;
            for (a_pays, units, tokens) in usages {
                let (payer, payee) = if a_pays { (&s.peer_a, &s.peer_b) } else { (&s.peer_b, &s.peer_a) };
                let kind = if tokens { UnitKind::Tokens } else { UnitKind::Calls };
                l.record_usage(s.session_id, payer, payee, units, kind, 0).unwrap();
                expected += units as u128 * if tokens { tok } else { call };
            }
            let total = l.invoice(&p, &s.peer_a) + l.invoice(&p, &s.peer_b);
            prop_assert_eq!(total.micros(), expected);
        }
    }
}
