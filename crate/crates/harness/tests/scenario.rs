//! The bundled dinner scenario end to end, and what replay catches when a
//! recording is tampered with.

use std::path::{Path, PathBuf};

use acp_core::envelope::Protocol;
use acp_core::transport::Note;
use acp_core::value::Value;
use acp_harness::{replay, run_scenario, RunError, ScenarioConfig, Transcript, Transport, Violation};

fn bundled() -> ScenarioConfig {
    let p: PathBuf = Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/restaurant.toml");
    ScenarioConfig::load(&p).unwrap()
}

fn completed(transport: Transport) -> Transcript {
    match run_scenario(&bundled(), transport) {
        Ok(t) => t,
        Err(e) => panic!("{e}"),
    }
}

fn field<'a>(v: &'a Value, key: &str) -> Option<&'a Value> {
    v.as_map()?.get(key)
}

fn count(t: &Transcript, msg_type: &str) -> usize {
    t.events.iter().filter(|e| e.envelope.msg_type == msg_type).count()
}

#[test]
fn seed_42_completes_every_phase() {
    let t = completed(Transport::Sim);
    assert_eq!(t.phases(), vec![1, 2, 3, 4, 5, 6, 7]);
    assert!(t.steps < 5_000, "{} steps", t.steps);

    let reservation = t.result("booking").and_then(|v| field(v, "reservation")).expect("reservation");
    assert_eq!(field(reservation, "time").and_then(Value::as_str), Some("19:30"));
    assert_eq!(field(reservation, "restaurant_id").and_then(Value::as_str), Some("r1"));
    assert!(t.result("travel").and_then(|v| field(v, "route")).is_some());

    let hellos = t.events.iter().filter(|e| e.envelope.msg_type == "hello" && e.envelope.sender == t.leader).count();
    assert_eq!(hellos, 1);
    let found = t
        .events
        .iter()
        .find(|e| e.envelope.msg_type == "discover_result")
        .and_then(|e| e.envelope.get("results").and_then(Value::as_list).map(|r| r.len()));
    assert!(found.is_some_and(|n| n >= 4), "{found:?}");
    for m in ["group_invite", "group_accept", "subtask_assign", "subtask_accept"] {
        assert_eq!(count(&t, m), 4, "{m}");
    }
    let agent_calls = t.events.iter().filter(|e| e.envelope.msg_type == "tool_invoke" && e.envelope.sender.as_agent().is_some()).count();
    assert!(agent_calls >= 5, "{agent_calls} tool calls");
    let prompts: Vec<_> = t.events.iter().filter(|e| e.envelope.msg_type == "user_prompt").filter_map(|e| e.envelope.get_str("prompt_id")).collect();
    assert!(prompts.contains(&"restaurant_choice"), "{prompts:?}");

    let v = replay(&t);
    assert!(v.clean(), "{:?}", v.violations);
}

#[test]
fn reruns_are_identical() {
    let (a, b) = (completed(Transport::Sim), completed(Transport::Sim));
    assert_eq!(a.transcript_hash, b.transcript_hash);
    assert_eq!(a.to_json(), b.to_json());
}

#[test]
fn transcripts_survive_json() {
    let t = completed(Transport::Sim);
    let back = Transcript::from_json(&t.to_json()).unwrap();
    assert_eq!(back, t);
    assert_eq!(back.compute_hash(), t.transcript_hash);
}

#[test]
fn empty_search_fails_in_execution() {
    let mut cfg = bundled();
    cfg.fixtures.insert("restaurants".into(), "fixtures/restaurants_empty.json".into());
    let Err(RunError::ScenarioFailed { phase, transcript, .. }) = run_scenario(&cfg, Transport::Sim) else {
        panic!("the run should fail");
    };
    assert_eq!(phase, 6);
    let reject = transcript.envelopes(Protocol::Aip).into_iter().find(|e| {
        e.msg_type == "negotiate" && e.sender.as_agent().is_some_and(|a| a.agent_name() == "info") && e.get_str("kind") == Some("reject")
    });
    assert!(reject.is_some(), "info never rejected");
    assert_eq!(transcript.phases(), vec![1, 2, 3, 4, 5, 6]);
    let v = replay(&transcript);
    assert!(v.clean(), "{:?}", v.violations);
}

#[test]
fn replay_flags_an_edited_envelope_by_seq() {
    let mut t = completed(Transport::Sim);
    let i = t.events.iter().position(|e| e.envelope.msg_type == "subtask_result").unwrap();
    let seq = t.events[i].seq;
    t.events[i].envelope.payload.insert("forged".into(), Value::Bool(true));
    let v = replay(&t);
    assert!(v.violations.iter().any(|x| matches!(x, Violation::Hash { .. })));
    let resealed = replay(&t.clone().seal());
    assert_eq!(
        resealed.violations.iter().filter_map(|x| match x { Violation::Signature { seq, .. } => Some(*seq), _ => None }).collect::<Vec<_>>(),
        vec![seq]
    );
}

#[test]
fn replay_flags_reordered_phases() {
    let mut t = completed(Transport::Sim);
    let idx: Vec<usize> = t.log.iter().enumerate().filter(|(_, l)| matches!(l.note, Note::Phase { .. }) && l.actor == t.leader).map(|(i, _)| i).collect();
    let (a, b) = (idx[2], idx[3]);
    let na = t.log[a].note.clone();
    t.log[a].note = t.log[b].note.clone();
    t.log[b].note = na;
    let v = replay(&t.seal());
    assert!(v.violations.iter().any(|x| matches!(x, Violation::Phase { .. })), "{:?}", v.violations);
}

#[test]
fn replayed_invoice_matches_the_ledger() {
    let t = completed(Transport::Sim);
    assert!(!t.invoices.is_empty());
    assert!(replay(&t).clean());
    let mut forged = t.clone();
    let payer = forged.invoices.keys().next().unwrap().clone();
    let amount = forged.invoices[&payer];
    forged.invoices.insert(payer, amount + acp_core::a3ap::Amount::from_micros(1));
    let v = replay(&forged.seal());
    assert!(v.violations.iter().any(|x| matches!(x, Violation::Invoice { .. })), "{:?}", v.violations);
}

#[test]
fn replay_flags_a_broken_anchor_chain() {
    let mut t = completed(Transport::Sim);
    let log = t.anchors.values_mut().find(|l| !l.is_empty()).unwrap();
    log[0].record_hash = "00".repeat(32);
    let v = replay(&t.seal());
    assert!(v.violations.iter().any(|x| matches!(x, Violation::Anchor { .. })), "{:?}", v.violations);
}

#[test]
fn socket_run_completes_and_replays_clean() {
    let t = completed(Transport::Socket);
    assert_eq!(t.phases(), vec![1, 2, 3, 4, 5, 6, 7]);
    assert!(t.result("booking").is_some() && t.result("travel").is_some());
    let v = replay(&t);
    assert!(v.clean(), "{:?}", v.violations);
}
