//! Offline re-validation of a recorded run. Nothing here trusts the
//! recording party: signatures, lifecycle, anchors, phases, invoices and the
//! seal are all recomputed from the transcript alone.

use std::collections::BTreeMap;
use std::fmt;

use acp_core::a3ap::{verify_envelope, Amount};
use acp_core::aip::{validate_aip, validate_transitions, TaskState};
use acp_core::arp::{verify_anchor, AnchorLog};
use acp_core::atp::Usage;
use acp_core::envelope::Protocol;
use acp_core::id::Principal;
use acp_core::transport::Note;
use acp_core::value::{from_value, Value};

use crate::transcript::Transcript;

/// Highest scenario phase; a completed run ends there.
pub const LAST_PHASE: u8 = 7;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    Hash { recorded: String, computed: String },
    Signature { seq: u64, detail: String },
    Transition { detail: String },
    Protocol { rule: String, detail: String },
    Anchor { registry: Principal, detail: String },
    Phase { detail: String },
    Invoice { payer: Principal, detail: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Hash { recorded, computed } => write!(f, "hash: recorded {recorded}, computed {computed}"),
            Violation::Signature { seq, detail } => write!(f, "signature at seq {seq}: {detail}"),
            Violation::Transition { detail } => write!(f, "transition: {detail}"),
            Violation::Protocol { rule, detail } => write!(f, "protocol ({rule}): {detail}"),
            Violation::Anchor { registry, detail } => write!(f, "anchor log of {registry}: {detail}"),
            Violation::Phase { detail } => write!(f, "phases: {detail}"),
            Violation::Invoice { payer, detail } => write!(f, "invoice for {payer}: {detail}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Verdict {
    pub violations: Vec<Violation>,
}

impl Verdict {
    pub fn clean(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn replay(t: &Transcript) -> Verdict {
    let mut v = Vec::new();
    let computed = t.compute_hash();
    if computed != t.transcript_hash {
        v.push(Violation::Hash { recorded: t.transcript_hash.clone(), computed });
    }
    check_signatures(t, &mut v);
    check_transitions(t, &mut v);
    let aip = validate_aip(&t.envelopes(Protocol::Aip));
    v.extend(aip.violations.into_iter().map(|x| Violation::Protocol { rule: x.rule, detail: format!("{}: {}", x.path, x.detail) }));
    check_anchors(t, &mut v);
    check_phases(t, &mut v);
    check_invoices(t, &mut v);
    Verdict { violations: v }
}

fn check_signatures(t: &Transcript, v: &mut Vec<Violation>) {
    for ev in &t.events {
        let env = &ev.envelope;
        let detail = match t.keys.get(&env.sender) {
            None => Some(format!("no key for {}", env.sender)),
            Some(k) => verify_envelope(env, &k.0).err().map(|e| e.to_string()),
        };
        if let Some(detail) = detail {
            v.push(Violation::Signature { seq: ev.seq, detail });
        }
    }
}

fn check_transitions(t: &Transcript, v: &mut Vec<Violation>) {
    let mut parsed = Vec::new();
    for l in t.log.iter().filter(|l| l.actor == t.leader) {
        if let Note::Transition { task, from, to, .. } = &l.note {
            match (from.parse::<TaskState>(), to.parse::<TaskState>()) {
                (Ok(f), Ok(s)) => parsed.push((task.as_str(), f, s)),
                (Err(e), _) | (_, Err(e)) => v.push(Violation::Transition { detail: e }),
            }
        }
    }
    let report = validate_transitions(parsed);
    v.extend(report.violations.into_iter().map(|x| Violation::Transition { detail: format!("{}: {}", x.path, x.detail) }));
}

fn check_anchors(t: &Transcript, v: &mut Vec<Violation>) {
    for (registry, entries) in &t.anchors {
        if !verify_anchor(&AnchorLog::from_entries(entries.clone())) {
            v.push(Violation::Anchor { registry: registry.clone(), detail: "hash chain does not verify".into() });
        }
    }
    // Every acknowledged registration must match the log of the registry that sent it.
    for ev in t.events.iter().filter(|e| e.envelope.msg_type == "register_result") {
        let env = &ev.envelope;
        let (Some(seq), Some(head)) = (env.get("anchor_seq").and_then(Value::as_int), env.get_str("anchor_head")) else {
            continue;
        };
        let entry = t.anchors.get(&env.sender).and_then(|es| es.iter().find(|e| e.seq as i64 == seq));
        if entry.map(|e| e.head.as_str()) != Some(head) {
            v.push(Violation::Anchor {
                registry: env.sender.clone(),
                detail: format!("register_result at seq {} cites anchor {seq} with head {head}", ev.seq),
            });
        }
    }
}

fn check_phases(t: &Transcript, v: &mut Vec<Violation>) {
    let phases = t.phases();
    let expected: Vec<u8> = (1..=phases.len() as u8).collect();
    if phases != expected {
        v.push(Violation::Phase { detail: format!("markers {phases:?} are not consecutive from 1") });
    }
    let reached = phases.last().copied().unwrap_or(0) == LAST_PHASE;
    if reached != t.completed() {
        v.push(Violation::Phase { detail: format!("reached phase {LAST_PHASE}: {reached}, task completed: {}", t.completed()) });
    }
}

fn check_invoices(t: &Transcript, v: &mut Vec<Violation>) {
    let mut owed: BTreeMap<Principal, Amount> = BTreeMap::new();
    for ev in t.events.iter().filter(|e| e.envelope.msg_type == "tool_result") {
        let Some(usage) = ev.envelope.get("usage").and_then(|u| from_value::<Usage>(u).ok()) else { continue };
        let charge = t.billing.price_per_token.times(usage.tokens) + t.billing.price_per_call.times(usage.calls);
        let due = owed.entry(ev.envelope.recipient.clone()).or_default();
        *due = *due + charge;
    }
    let payers: std::collections::BTreeSet<&Principal> = owed.keys().chain(t.invoices.keys()).collect();
    for payer in payers {
        let replayed = owed.get(payer).copied().unwrap_or_default();
        let recorded = t.invoices.get(payer).copied().unwrap_or_default();
        let ledger = t.ledger.invoice(&t.billing, payer);
        if replayed != recorded || ledger != recorded {
            v.push(Violation::Invoice {
                payer: payer.clone(),
                detail: format!("recorded {recorded}, ledger {ledger}, replayed {replayed}"),
            });
        }
    }
}
