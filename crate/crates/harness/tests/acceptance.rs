//! Acceptance suite. Each criterion is checked against an oracle written
//! here, independent of the code under test, and reported on one line.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use acp_core::a3ap::{decode_and_verify, Amount, Identity};
use acp_core::adp::{discover, match_score, Catalog, MatchMode, Query};
use acp_core::aip::validate_aip;
use acp_core::arp::{
    verify_anchor, AnchorLog, CapabilityChange, RegisterRequest, RegistryNode, RegistryService, RegistryTree, TagDenylist,
};
use acp_core::descriptor::CapabilityDescriptor;
use acp_core::envelope::{Envelope, Protocol};
use acp_core::id::{AgentId, Principal, RegistryPath, ServiceId};
use acp_core::map;
use acp_core::testkit::Org;
use acp_core::transport::frame::write_frame;
use acp_core::transport::{actor_ref, Actor, ActorCtx, EndpointAddr, LiveNetwork, SimNetwork};
use acp_core::value::{to_value, Value};
use acp_harness::{replay, run_scenario, ScenarioConfig, Transcript, Transport};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;
type Criterion = (u8, &'static str, Box<dyn Fn() -> Outcome>);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn bundled() -> ScenarioConfig {
    ScenarioConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/restaurant.toml")).expect("bundled scenario")
}

fn scenario(transport: Transport) -> Result<Transcript, String> {
    run_scenario(&bundled(), transport).map_err(|e| e.to_string())
}

/// Records everything it receives and sends a fixed batch on start.
struct Probe {
    id: Identity,
    send: Vec<Envelope>,
    got: Vec<Envelope>,
}

impl Probe {
    fn new(id: Identity, send: Vec<Envelope>) -> Self {
        Self { id, send, got: Vec::new() }
    }
}

impl Actor for Probe {
    fn principal(&self) -> Principal {
        self.id.principal.clone()
    }
    fn on_start(&mut self, ctx: &mut ActorCtx) {
        for e in self.send.drain(..) {
            ctx.send(e);
        }
    }
    fn on_message(&mut self, env: Envelope, _: &mut ActorCtx) {
        self.got.push(env);
    }
}

// ---------------------------------------------------------------- criterion 1

const PHASES: [&str; 4] = ["identity_verification", "metadata_submission", "compliance_review", "anchoring"];

/// A reported phase list is a prefix of the four phases, every phase but the
/// last passed, and the run stops exactly at the first failure.
fn phase_sequence_ok(phases: &[(String, bool)], succeeded: bool) -> bool {
    let names: Vec<&str> = phases.iter().map(|(n, _)| n.as_str()).collect();
    if names.is_empty() || names[..] != PHASES[..names.len()] {
        return false;
    }
    let (last, head) = phases.split_last().expect("non-empty");
    if head.iter().any(|(_, ok)| !ok) {
        return false;
    }
    if succeeded {
        names.len() == 4 && last.1
    } else {
        !last.1
    }
}

fn phases_of(result: &Envelope) -> Vec<(String, bool)> {
    result.payload["phases"]
        .as_list()
        .unwrap_or(&[])
        .iter()
        .filter_map(Value::as_map)
        .map(|p| (p["phase"].as_str().unwrap_or_default().to_string(), p["ok"].as_bool().unwrap_or(false)))
        .collect()
}

struct Registration {
    id: Identity,
    request: Envelope,
    /// The phase expected to fail, if any.
    fails_at: Option<usize>,
}

fn registrations(org: &mut Org) -> Vec<Registration> {
    let mut out = Vec::new();
    let mut add = |org: &mut Org, at: &str, name: &str, tags: &[&str], fails_at: Option<usize>| {
        let id = org.agent(at, name);
        let d = CapabilityDescriptor::new(id.principal.as_agent().unwrap().clone(), tags);
        let body = RegisterRequest { credential: id.credential.clone().unwrap(), descriptor: d };
        let Value::Map(payload) = to_value(&body).unwrap() else { unreachable!() };
        let to: Principal = "svc://registry/root/food".parse().unwrap();
        let request = org.envelope(&id, Protocol::Arp, "register_request", &to, None, payload);
        out.push(Registration { id, request, fails_at });
    };
    add(org, "root/food", "good", &["restaurant.search"], None);
    add(org, "root/travel", "stranger", &["restaurant.search"], Some(0));
    add(org, "root/food", "empty", &[], Some(1));
    add(org, "root/food", "banned", &["restricted.weapons"], Some(2));
    out
}

fn check_registration(regs: &[Registration], replies: &BTreeMap<Principal, Envelope>) -> Outcome {
    for r in regs {
        let reply = replies.get(&r.id.principal).ok_or_else(|| format!("{} got no register_result", r.id.principal))?;
        let phases = phases_of(reply);
        let ok = reply.payload.get("ok").and_then(Value::as_bool) == Some(true);
        ensure!(ok == r.fails_at.is_none(), "{}: ok={ok}", r.id.principal);
        ensure!(phase_sequence_ok(&phases, ok), "{}: bad phase sequence {phases:?}", r.id.principal);
        if let Some(f) = r.fails_at {
            ensure!(phases.len() == f + 1, "{}: phases after the failure ran: {phases:?}", r.id.principal);
        }
    }
    Ok(format!("{} registrations, phase sequences valid", regs.len()))
}

fn criterion_1(transport: Transport) -> Outcome {
    let start = Instant::now();
    let mut org = Org::new(11, &["root", "root/food", "root/travel"]);
    let regs = registrations(&mut org);
    let node = RegistryNode::new("root/food".parse().unwrap(), org.roots().clone())
        .with_policy(TagDenylist(["restricted.weapons".to_string()].into()));
    let service = RegistryService::new(org.registry("root/food"), node, 500);
    let replies: BTreeMap<Principal, Envelope> = match transport {
        Transport::Sim => {
            let mut net = SimNetwork::new(1).with_keyring(org.keyring().clone());
            net.add(service).unwrap();
            for r in &regs {
                net.add(Probe::new(r.id.clone(), vec![r.request.clone()])).unwrap();
            }
            ensure!(net.run_to_quiescence(1_000), "sim never settled");
            regs.iter()
                .filter_map(|r| Some((r.id.principal.clone(), net.actor::<Probe>(&r.id.principal)?.got.first()?.clone())))
                .collect()
        }
        Transport::Socket => {
            let mut net = LiveNetwork::new().with_keyring(org.keyring().clone());
            let any = EndpointAddr::Socket("127.0.0.1:0".into());
            net.add(service, &any).unwrap();
            for r in &regs {
                net.add(Probe::new(r.id.clone(), vec![r.request.clone()]), &any).unwrap();
            }
            net.start();
            let deadline = Instant::now() + Duration::from_secs(5);
            while net.events().iter().filter(|e| e.envelope.msg_type == "register_result").count() < regs.len() && Instant::now() < deadline {
                std::thread::sleep(Duration::from_millis(2));
            }
            let actors = net.shutdown();
            regs.iter()
                .filter_map(|r| {
                    let p = actor_ref::<Probe>(actors.get(&r.id.principal)?.as_ref())?;
                    Some((r.id.principal.clone(), p.got.first()?.clone()))
                })
                .collect()
        }
    };
    let detail = check_registration(&regs, &replies)?;
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(1), "took {took:?}");
    Ok(format!("{detail} in {} ms", took.as_millis()))
}

// ---------------------------------------------------------------- criterion 2

fn s<'a>(e: &'a Envelope, key: &str) -> Option<&'a str> {
    e.payload.get(key).and_then(Value::as_str)
}

/// Declared order at the granularity it is defined: invites and their
/// answers before any assignment, each sub-task's negotiation between its
/// assignment and its result, the report last.
fn declared_order(msgs: &[Envelope]) -> Result<(), String> {
    let kinds: Vec<&str> = msgs.iter().map(|e| e.msg_type.as_str()).collect();
    let first = |t: &str| kinds.iter().position(|k| *k == t);
    let last = |t: &str| kinds.iter().rposition(|k| *k == t);
    let assign = first("subtask_assign").ok_or("no subtask_assign")?;
    for t in ["group_invite", "group_accept"] {
        ensure!(last(t).is_some_and(|i| i < assign), "{t} after the first assignment");
    }
    for (i, e) in msgs.iter().enumerate().filter(|(_, e)| e.msg_type == "group_accept") {
        let invited = msgs[..i].iter().any(|x| x.msg_type == "group_invite" && x.recipient == e.sender);
        ensure!(invited, "accept from {} before its invite", e.sender);
    }
    let mut assigned: BTreeMap<&str, usize> = BTreeMap::new();
    let mut resulted: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, e) in msgs.iter().enumerate() {
        match e.msg_type.as_str() {
            "subtask_assign" => {
                assigned.insert(s(e, "subtask_id").unwrap_or_default(), i);
            }
            "subtask_result" => {
                resulted.insert(s(e, "subtask_id").unwrap_or_default(), i);
            }
            _ => {}
        }
    }
    for e in msgs.iter().filter(|e| e.msg_type == "negotiate") {
        let Some(id) = s(e, "subtask_id") else { continue };
        let i = msgs.iter().position(|x| x.msg_id == e.msg_id).expect("present");
        ensure!(assigned.get(id).is_some_and(|a| *a < i), "negotiation on {id} before its assignment");
        if let Some(r) = resulted.get(id) {
            ensure!(i < *r || e.sender == msgs[*r].recipient, "worker negotiation on {id} after its result");
        }
    }
    ensure!(kinds.last() == Some(&"task_report"), "report is not last");
    ensure!(assigned.len() == resulted.len(), "{} assigned, {} results", assigned.len(), resulted.len());
    Ok(())
}

/// `before(a, b)`: the interaction needs message a ahead of message b.
struct Precedence<'a> {
    msgs: &'a [Envelope],
    leader: Principal,
    deps: BTreeMap<String, Vec<String>>,
}

fn thread(e: &Envelope) -> Option<&str> {
    matches!(e.msg_type.as_str(), "negotiate" | "user_prompt" | "user_reply").then(|| s(e, "thread_id")).flatten()
}

impl<'a> Precedence<'a> {
    fn new(msgs: &'a [Envelope]) -> Self {
        let leader = msgs.iter().find(|e| e.msg_type == "group_invite").expect("invites").sender.clone();
        let deps = msgs
            .iter()
            .filter(|e| e.msg_type == "subtask_assign")
            .map(|e| {
                let d = e.payload.get("depends_on").and_then(Value::as_list).map(|l| l.to_vec()).unwrap_or_default();
                (s(e, "subtask_id").unwrap().to_string(), d.iter().filter_map(|x| x.as_str().map(str::to_string)).collect())
            })
            .collect();
        Self { msgs, leader, deps }
    }

    fn before(&self, a: usize, b: usize) -> bool {
        let (x, y) = (&self.msgs[a], &self.msgs[b]);
        let sub = |e: &Envelope| s(e, "subtask_id").map(str::to_string);
        if y.correlation_id == Some(x.msg_id) || y.msg_type == "task_report" {
            return true;
        }
        match (x.msg_type.as_str(), y.msg_type.as_str()) {
            ("group_invite" | "group_accept" | "group_decline", "subtask_assign") => true,
            ("subtask_accept", "subtask_start") => true,
            ("subtask_start", "negotiate" | "subtask_result") => y.sender != self.leader && sub(x) == sub(y),
            ("subtask_result", "subtask_start") => self.deps.get(&sub(y).unwrap_or_default()).is_some_and(|d| d.contains(&sub(x).unwrap_or_default())),
            ("negotiate", "negotiate") => thread(x) == thread(y),
            ("negotiate", "subtask_result") => sub(x) == sub(y),
            ("negotiate", "user_prompt") => x.sender != self.leader && thread(x) == thread(y),
            ("user_reply", "negotiate") => y.sender == self.leader && thread(x) == thread(y),
            _ => false,
        }
    }

    fn violated_by(&self, i: usize, j: usize) -> bool {
        if j < i {
            (j..i).any(|k| self.before(k, i))
        } else {
            (i + 1..=j).any(|k| self.before(i, k))
        }
    }
}

fn criterion_2(transport: Transport) -> Outcome {
    let t = scenario(transport)?;
    let msgs = t.envelopes(Protocol::Aip);
    declared_order(&msgs)?;
    let report = validate_aip(&msgs);
    ensure!(report.ok, "validator rejected the run: {:?}", report.violations);
    let oracle = Precedence::new(&msgs);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut violating, mut caught, mut tries) = (0, 0, 0);
    while violating < 1_000 {
        tries += 1;
        ensure!(tries < 1_000_000, "too few violating moves");
        let (i, j) = (rng.gen_range(0..msgs.len()), rng.gen_range(0..msgs.len()));
        if i == j || !oracle.violated_by(i, j) {
            continue;
        }
        violating += 1;
        let mut v = msgs.clone();
        let m = v.remove(i);
        v.insert(j, m);
        if !validate_aip(&v).ok {
            caught += 1;
        }
    }
    ensure!(caught == violating, "rejected {caught} of {violating} violating reorderings");
    Ok(format!("{} AIP messages in declared order; {caught}/{violating} violating reorderings rejected", msgs.len()))
}

// ---------------------------------------------------------------- criterion 3

/// Score-and-sort oracle following the written formula.
fn oracle_discover(descs: &[CapabilityDescriptor], q: &Query) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = descs
        .iter()
        .filter_map(|d| {
            let have = &d.capability_tags;
            let frac = |want: &BTreeSet<String>| {
                if want.is_empty() {
                    1.0
                } else {
                    want.iter().filter(|t| have.contains(*t)).count() as f64 / want.len() as f64
                }
            };
            let coverage = frac(&q.required_tags);
            let cost_ok = q.max_cost_tokens.is_none_or(|m| d.qos.cost_per_call_tokens <= m);
            let latency_ok = q.max_latency_ms.is_none_or(|m| d.qos.latency_ms_p50 <= m);
            let score = if cost_ok && latency_ok { 0.7 * coverage + 0.3 * frac(&q.optional_tags) } else { 0.0 };
            let keep = score > 0.0 && (q.mode == MatchMode::Loose || coverage == 1.0);
            keep.then(|| (d.agent.to_string(), score))
        })
        .collect();
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    out.truncate(q.limit);
    out
}

fn random_tags(rng: &mut ChaCha8Rng, pool: &[&str], max: usize) -> BTreeSet<String> {
    let n = rng.gen_range(0..=max);
    pool.choose_multiple(rng, n).map(|t| t.to_string()).collect()
}

fn criterion_3() -> Outcome {
    const POOL: [&str; 8] = ["a.x", "a.y", "b.x", "b.y", "c.x", "c.y", "d.x", "d.y"];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let svc = ServiceId::new(&["registry", "root", "cat"]).unwrap();
    let (mut queries, mut mismatches) = (0, 0);
    for _ in 0..200 {
        let n = rng.gen_range(0..=100);
        let mut catalog = Catalog::new();
        let mut descs = Vec::new();
        for i in 0..n {
            let agent: AgentId = format!("acp://root/cat/agent-{:03}", rng.gen_range(0..1000) * 1000 + i).parse().unwrap();
            let mut d = CapabilityDescriptor::new(agent, &[]);
            d.capability_tags = random_tags(&mut rng, &POOL, 5);
            d.qos.cost_per_call_tokens = rng.gen_range(0..100);
            d.qos.latency_ms_p50 = rng.gen_range(0..500);
            catalog.apply(&svc, CapabilityChange::Upsert { descriptor: d.clone() }).map_err(|e| e.to_string())?;
            descs.push(d);
        }
        for _ in 0..50 {
            let mut q = Query::requiring(&[]);
            q.required_tags = random_tags(&mut rng, &POOL, 3);
            q.optional_tags = random_tags(&mut rng, &POOL, 3);
            if q.required_tags.is_empty() && q.optional_tags.is_empty() {
                q.required_tags.insert(POOL[rng.gen_range(0..POOL.len())].into());
            }
            q.max_cost_tokens = rng.gen_bool(0.3).then(|| rng.gen_range(0..100));
            q.max_latency_ms = rng.gen_bool(0.3).then(|| rng.gen_range(0..500));
            q.limit = rng.gen_range(1..=20);
            if rng.gen_bool(0.5) {
                q = q.loose();
            }
            let got: Vec<(String, f64)> = discover(&catalog, &q).into_iter().map(|r| (r.agent.to_string(), r.score)).collect();
            queries += 1;
            if got != oracle_discover(&descs, &q) {
                mismatches += 1;
            }
        }
    }
    ensure!(mismatches == 0, "{mismatches} of {queries} queries differ from the oracle");
    Ok(format!("{queries} queries over 200 catalogs, 0 mismatches"))
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let d = |tags: &[&str]| CapabilityDescriptor::new("acp://root/x/p".parse().unwrap(), tags);
    let partial = match_score(&Query::requiring(&["a", "b"]), &d(&["a"]));
    let expected = 0.7 * 0.5 + 0.3 * 1.0;
    ensure!((partial - expected).abs() < 1e-12 && (partial - 0.65).abs() < 1e-12, "partial coverage scored {partial}");
    let full = match_score(&Query::requiring(&["a", "b"]), &d(&["a", "b", "c"]));
    ensure!((full - 1.0).abs() < 1e-12, "full coverage scored {full}");
    Ok(format!("partial {partial}, full {full}"))
}

// ---------------------------------------------------------------- criterion 5

fn mutate_all(t: &Transcript, rng: &mut ChaCha8Rng, trials: usize) -> Result<(usize, usize), String> {
    let signed: Vec<(Vec<u8>, Principal)> =
        t.events.iter().map(|e| (e.envelope.to_bytes().expect("envelopes encode"), e.envelope.sender.clone())).collect();
    let mut false_rejections = 0;
    for (bytes, sender) in &signed {
        if decode_and_verify(bytes, &t.keys[sender].0).is_err() {
            false_rejections += 1;
        }
    }
    let mut accepted = 0;
    for _ in 0..trials {
        let (bytes, sender) = signed.choose(rng).expect("events");
        let mut m = bytes.clone();
        let i = rng.gen_range(0..m.len());
        m[i] ^= rng.gen_range(1..=255u8);
        if decode_and_verify(&m, &t.keys[sender].0).is_ok() {
            accepted += 1;
        }
    }
    Ok((false_rejections, accepted))
}

/// Writes mutated frames straight to a live endpoint; none may reach it.
fn inject_over_socket(rng: &mut ChaCha8Rng, frames: usize) -> Result<(usize, usize), String> {
    let org = Org::new(5, &["root"]);
    let (a, b) = (org.agent("root", "sender"), org.agent("root", "receiver"));
    let mut net = LiveNetwork::new().with_keyring(org.keyring().clone());
    let any = EndpointAddr::Socket("127.0.0.1:0".into());
    let EndpointAddr::Socket(addr) = net.add(Probe::new(b.clone(), vec![]), &any).unwrap() else { unreachable!() };
    net.start();
    let mut ids = acp_core::envelope::IdSource::seeded(1);
    let mut ctx = ActorCtx::new(0, &mut ids);
    let honest = a.envelope(&mut ctx, Protocol::Arp, "resolve_request", &b.principal, None, map! { "agent" => "acp://root/x" }).unwrap();
    let bytes = honest.to_bytes().unwrap();
    for _ in 0..frames {
        let mut m = bytes.clone();
        let i = rng.gen_range(0..m.len());
        m[i] ^= rng.gen_range(1..=255u8);
        let mut s = std::net::TcpStream::connect(&addr).map_err(|e| e.to_string())?;
        write_frame(&mut s, &m).map_err(|e| e.to_string())?;
    }
    let mut s = std::net::TcpStream::connect(&addr).map_err(|e| e.to_string())?;
    write_frame(&mut s, &bytes).map_err(|e| e.to_string())?;
    drop(s);
    let deadline = Instant::now() + Duration::from_secs(5);
    while !net.events().iter().any(|e| e.envelope == honest) && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(5));
    }
    std::thread::sleep(Duration::from_millis(100));
    let actors = net.shutdown();
    let got = &actor_ref::<Probe>(actors[&b.principal].as_ref()).expect("probe").got;
    let honest_seen = got.iter().filter(|e| **e == honest).count();
    Ok((got.len() - honest_seen, honest_seen))
}

fn criterion_5(transport: Transport) -> Outcome {
    let t = scenario(transport)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (false_rejections, accepted) = mutate_all(&t, &mut rng, 10_000)?;
    ensure!(false_rejections == 0, "{false_rejections} honest envelopes rejected");
    ensure!(accepted == 0, "{accepted} of 10000 mutations verified");
    let mut detail = format!("10000 mutations of {} {} envelopes rejected, 0 false rejections", t.events.len(), transport.as_str());
    if transport == Transport::Socket {
        let (leaked, honest) = inject_over_socket(&mut rng, 300)?;
        ensure!(leaked == 0, "{leaked} mutated frames reached the actor");
        ensure!(honest == 1, "the honest frame arrived {honest} times");
        detail.push_str("; 300 mutated frames on the wire all dropped");
    }
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 6

fn chain_head(prev_hex: &str, record_hex: &str) -> String {
    let mut h = Sha256::new();
    h.update(hex::decode(prev_hex).unwrap());
    h.update(hex::decode(record_hex).unwrap());
    hex::encode(h.finalize())
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let genesis = hex::encode(Sha256::digest(b""));
    for trial in 0..1_000 {
        let n = if trial % 100 == 0 { 1_000 } else { rng.gen_range(1..=200) };
        let mut log = AnchorLog::new();
        for _ in 0..n {
            log.append(rng.gen());
        }
        let entries = log.entries().to_vec();
        // The log must be the chain the written rule builds.
        let mut prev = genesis.clone();
        for (k, e) in entries.iter().enumerate() {
            ensure!(e.seq == k as u64 + 1 && e.prev_head == prev, "trial {trial}: entry {k} mislinked");
            ensure!(e.head == chain_head(&prev, &e.record_hash), "trial {trial}: entry {k} head differs");
            prev = e.head.clone();
        }
        ensure!(verify_anchor(&log), "trial {trial}: honest log of {n} rejected");
        let mut bad = entries.clone();
        let k = rng.gen_range(0..n);
        let flip = |s: &mut String, rng: &mut ChaCha8Rng| {
            let mut b = hex::decode(&*s).unwrap();
            let i = rng.gen_range(0..b.len());
            b[i] ^= rng.gen_range(1..=255u8);
            *s = hex::encode(b);
        };
        match rng.gen_range(0..4) {
            0 => bad[k].seq = bad[k].seq.wrapping_add(rng.gen_range(1..5)),
            1 => flip(&mut bad[k].record_hash, &mut rng),
            2 => flip(&mut bad[k].prev_head, &mut rng),
            _ => flip(&mut bad[k].head, &mut rng),
        }
        ensure!(!verify_anchor(&AnchorLog::from_entries(bad)), "trial {trial}: mutation of entry {k} accepted");
    }
    Ok("1000 honest logs verified, 1000 single-entry mutations rejected".into())
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7() -> Outcome {
    let t = scenario(Transport::Sim)?;
    ensure!(!t.invoices.is_empty(), "nothing was billed");
    // Replayed from the messages alone: every metered tool_result is owed by its recipient.
    let mut owed: BTreeMap<Principal, u128> = BTreeMap::new();
    let micros = |a: Amount| a.micros();
    for e in t.events.iter().filter(|e| e.envelope.msg_type == "tool_result") {
        let Some(u) = e.envelope.get("usage").and_then(Value::as_map) else { continue };
        let tokens = u["tokens"].as_int().unwrap_or(0) as u128;
        let calls = u["calls"].as_int().unwrap_or(0) as u128;
        *owed.entry(e.envelope.recipient.clone()).or_default() +=
            tokens * micros(t.billing.price_per_token) + calls * micros(t.billing.price_per_call);
    }
    let live: BTreeMap<Principal, u128> = t.invoices.iter().map(|(p, a)| (p.clone(), a.micros())).collect();
    ensure!(owed == live, "replayed {owed:?}, live {live:?}");
    let v = replay(&t);
    ensure!(v.clean(), "replay found {:?}", v.violations);
    let total: u128 = live.values().sum();
    Ok(format!("{} payers, total {} exact", live.len(), Amount::from_micros(total)))
}

// ---------------------------------------------------------------- criterion 8

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0;
    for trial in 0..40 {
        let mut paths = vec!["root".to_string()];
        let nodes = rng.gen_range(1..=15);
        while paths.len() < nodes {
            let parent = paths.choose(&mut rng).unwrap().clone();
            if parent.split('/').count() > 4 {
                continue;
            }
            let child = format!("{parent}/n{}", paths.len());
            paths.push(child);
        }
        let refs: Vec<&str> = paths.iter().map(String::as_str).collect();
        let mut org = Org::new(trial, &refs);
        let mut tree = RegistryTree::new();
        for p in &paths {
            tree.insert(RegistryNode::new(p.parse().unwrap(), org.roots().clone())).map_err(|e| e.to_string())?;
        }
        let mut agents: Vec<(AgentId, RegistryPath)> = Vec::new();
        for i in 0..rng.gen_range(1..=50) {
            let at: RegistryPath = paths.choose(&mut rng).unwrap().parse().unwrap();
            let id = org.agent(&at.to_string(), &format!("a{i}"));
            let d = CapabilityDescriptor::new(id.principal.as_agent().unwrap().clone(), &["x.y"]);
            let body = RegisterRequest { credential: id.credential.clone().unwrap(), descriptor: d };
            let Value::Map(payload) = to_value(&body).unwrap() else { unreachable!() };
            let to: Principal = at.registry_service().into();
            let env = org.envelope(&id, Protocol::Arp, "register_request", &to, None, payload);
            tree.node_mut(&at).unwrap().register(&env, 0).result.map_err(|e| e.to_string())?;
            agents.push((id.principal.as_agent().unwrap().clone(), at));
        }
        let depth = tree.depth();
        ensure!(depth <= 4, "tree depth {depth}");
        let starts: Vec<RegistryPath> = tree.paths().cloned().collect();
        for (agent, home) in &agents {
            for start in &starts {
                let (rec, hops) = tree.resolve(start, agent).map_err(|e| format!("{agent} from {start}: {e}"))?;
                ensure!(rec.descriptor.agent == *agent, "resolved {} for {agent}", rec.descriptor.agent);
                // Tree distance through the deepest common ancestor.
                let common = start.segments().iter().zip(home.segments()).take_while(|(a, b)| a == b).count();
                let distance = start.segments().len() + home.segments().len() - 2 * common;
                ensure!(hops == distance, "{agent} from {start}: {hops} hops, tree distance {distance}");
                ensure!(hops <= start.depth() + depth, "{agent} from {start}: {hops} hops over the bound");
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} resolutions within depth(start) + depth(tree)"))
}

// ---------------------------------------------------------------- criterion 9

fn field<'a>(v: &'a Value, key: &str) -> Option<&'a Value> {
    v.as_map()?.get(key)
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let t = scenario(Transport::Sim)?;
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(10), "took {took:?}");
    ensure!(t.steps < 5_000, "{} sim steps", t.steps);
    ensure!(t.phases() == [1, 2, 3, 4, 5, 6, 7], "phase markers {:?}", t.phases());
    ensure!(t.result("booking").and_then(|v| field(v, "reservation")).is_some(), "no reservation");
    ensure!(t.result("travel").and_then(|v| field(v, "route")).is_some(), "no route");
    let again = scenario(Transport::Sim)?;
    ensure!(again.transcript_hash == t.transcript_hash, "rerun hash differs");
    Ok(format!("{} steps, {} ms, hash {}", t.steps, took.as_millis(), &t.transcript_hash[..16]))
}

// ---------------------------------------------------------------- criterion 10

struct Pinger {
    id: Identity,
    to: Vec<Principal>,
    count: i64,
}

impl Actor for Pinger {
    fn principal(&self) -> Principal {
        self.id.principal.clone()
    }
    fn on_start(&mut self, ctx: &mut ActorCtx) {
        for n in 0..self.count {
            for to in &self.to {
                self.id.notice(ctx, Protocol::Arp, "resolve_request", to, None, map! { "agent" => "acp://root/x", "n" => n });
            }
        }
    }
    fn on_message(&mut self, _: Envelope, _: &mut ActorCtx) {}
}

/// Several senders stream numbered messages to several receivers at once.
fn per_pair_fifo() -> Outcome {
    let org = Org::new(10, &["root"]);
    let senders: Vec<Identity> = (0..3).map(|i| org.agent("root", &format!("s{i}"))).collect();
    let receivers: Vec<Identity> = (0..2).map(|i| org.agent("root", &format!("r{i}"))).collect();
    let to: Vec<Principal> = receivers.iter().map(|r| r.principal.clone()).collect();
    let mut net = LiveNetwork::new().with_keyring(org.keyring().clone());
    let any = EndpointAddr::Socket("127.0.0.1:0".into());
    for r in &receivers {
        net.add(Probe::new(r.clone(), vec![]), &any).unwrap();
    }
    net.start();
    for s in &senders {
        net.add(Pinger { id: s.clone(), to: to.clone(), count: 200 }, &any).unwrap();
    }
    net.start();
    let want = senders.len() * receivers.len() * 200;
    let deadline = Instant::now() + Duration::from_secs(10);
    while net.events().len() < want && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(5));
    }
    let events = net.events();
    net.shutdown();
    ensure!(events.len() == want, "{} of {want} delivered", events.len());
    let mut next: BTreeMap<(Principal, Principal), i64> = BTreeMap::new();
    let mut interleaved = false;
    for (k, e) in events.iter().enumerate() {
        let n = e.envelope.payload["n"].as_int().unwrap_or(-1);
        let slot = next.entry((e.envelope.sender.clone(), e.envelope.recipient.clone())).or_default();
        ensure!(n == *slot, "{} -> {} delivered {n}, expected {slot}", e.envelope.sender, e.envelope.recipient);
        *slot += 1;
        interleaved |= k > 0 && events[k - 1].envelope.sender != e.envelope.sender;
    }
    Ok(format!("{want} messages over {} pairs in order{}", next.len(), if interleaved { ", pairs interleaved" } else { "" }))
}

fn criterion_10() -> Outcome {
    let mut parts = Vec::new();
    for t in [Transport::Sim, Transport::Socket] {
        for (n, f) in [(1, criterion_1 as fn(Transport) -> Outcome), (2, criterion_2), (5, criterion_5)] {
            f(t).map_err(|e| format!("criterion {n} on {}: {e}", t.as_str()))?;
        }
        parts.push(t.as_str());
    }
    let fifo = per_pair_fifo()?;
    Ok(format!("criteria 1, 2, 5 pass on {}; {fifo}", parts.join(" and ")))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        (1, "registration phases", Box::new(|| criterion_1(Transport::Sim))),
        (2, "interaction order", Box::new(|| criterion_2(Transport::Sim))),
        (3, "discovery oracle", Box::new(criterion_3)),
        (4, "score spot values", Box::new(criterion_4)),
        (5, "signature soundness", Box::new(|| criterion_5(Transport::Sim))),
        (6, "anchor integrity", Box::new(criterion_6)),
        (7, "ledger reconciliation", Box::new(criterion_7)),
        (8, "resolution bound", Box::new(criterion_8)),
        (9, "end-to-end scenario", Box::new(criterion_9)),
        (10, "backend transparency", Box::new(criterion_10)),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, check) in criteria.iter() {
        if !filter.is_empty() && !filter.iter().any(|f| f == &n.to_string()) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS {name}: {detail} [{secs:.2}s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL {name}: {why} [{secs:.2}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
