//! Runs a scenario end to end on the sim bus or over sockets.

use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use acp_core::aip::PAgent;
use acp_core::arp::{AnchorEntry, RegistryService};
use acp_core::id::Principal;
use acp_core::transport::{actor_ref, Actor, BusEvent, EndpointAddr, LiveNetwork, LogEntry, SimNetwork};
use acp_core::value::{Map, Value};

use crate::config::{ConfigError, ScenarioConfig};
use crate::deploy::{build, Cast, Mode};
use crate::transcript::Transcript;

/// Sim steps infrastructure gets to register every worker before the
/// personal agent starts.
const BOOT_STEPS: u64 = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    Sim,
    Socket,
}

impl Transport {
    pub fn as_str(self) -> &'static str {
        match self {
            Transport::Sim => "sim",
            Transport::Socket => "socket",
        }
    }
}

impl std::str::FromStr for Transport {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sim" => Ok(Transport::Sim),
            "socket" => Ok(Transport::Socket),
            _ => Err(format!("unknown transport {s:?}, expected sim or socket")),
        }
    }
}

#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    /// The run ended without completing; the transcript is still usable.
    ScenarioFailed { phase: u8, cause: String, transcript: Box<Transcript> },
    Transport(String),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(e) => e.fmt(f),
            RunError::ScenarioFailed { phase, cause, .. } => write!(f, "scenario failed in phase {phase}: {cause}"),
            RunError::Transport(e) => write!(f, "transport: {e}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}

/// Everything read back from the actors once the run has ended.
struct Outcome {
    steps: u64,
    events: Vec<BusEvent>,
    log: Vec<LogEntry>,
    anchors: BTreeMap<Principal, Vec<AnchorEntry>>,
    report: Option<Map>,
    phase: u8,
}

/// Runs the scenario with its configured seed.
pub fn run_scenario(cfg: &ScenarioConfig, transport: Transport) -> Result<Transcript, RunError> {
    run_with_seed(cfg, cfg.seed, transport)
}

pub fn run_with_seed(cfg: &ScenarioConfig, seed: u64, transport: Transport) -> Result<Transcript, RunError> {
    let (cast, outcome) = match transport {
        Transport::Sim => {
            let cast = build(cfg, seed, Mode::Sim)?;
            run_sim(cast, seed, cfg.max_steps)
        }
        Transport::Socket => {
            let cast = build(cfg, seed, Mode::Live)?;
            run_socket(cast, Duration::from_secs(30))?
        }
    };
    let ledger = cast.ledger.snapshot();
    let invoices = cast.ledger.payers().into_iter().map(|p| (p.clone(), cast.ledger.invoice(&cfg.billing, &p))).collect();
    let transcript = Transcript {
        scenario: cfg.name.clone(),
        seed,
        transport: transport.as_str().into(),
        steps: outcome.steps,
        events: outcome.events,
        log: outcome.log,
        keys: cast.keys.snapshot(),
        anchors: outcome.anchors,
        ledger,
        billing: cfg.billing,
        invoices,
        leader: cast.leader.clone(),
        report: outcome.report,
        transcript_hash: String::new(),
    }
    .seal();
    if transcript.completed() {
        return Ok(transcript);
    }
    let cause = match &transcript.report {
        None => "the task never reported".to_string(),
        Some(r) => r
            .get("failure")
            .and_then(Value::as_map)
            .and_then(|f| f.get("detail"))
            .and_then(Value::as_str)
            .unwrap_or("task failed")
            .to_string(),
    };
    Err(RunError::ScenarioFailed { phase: outcome.phase, cause, transcript: Box::new(transcript) })
}

fn registry_principals(cast: &Cast) -> Vec<Principal> {
    cast.registries.iter().map(|r| r.principal()).collect()
}

/// Starts every party except the personal agent and its user, and runs
/// until registration and catalog sync are done.
pub fn boot_sim(cast: &mut Cast, seed: u64) -> SimNetwork {
    let mut net = SimNetwork::new(seed).with_keyring(cast.keys.clone());
    for r in std::mem::take(&mut cast.registries) {
        net.add(r).expect("distinct principals");
    }
    if let Some(d) = cast.discovery.take() {
        net.add(d).expect("distinct principals");
    }
    for m in std::mem::take(&mut cast.managers) {
        net.add(m).expect("distinct principals");
    }
    for w in std::mem::take(&mut cast.workers) {
        net.add(w).expect("distinct principals");
    }
    net.run_to_quiescence(BOOT_STEPS);
    net
}

fn run_sim(mut cast: Cast, seed: u64, max_steps: u64) -> (Cast, Outcome) {
    let registries = registry_principals(&cast);
    let mut net = boot_sim(&mut cast, seed);
    net.add(cast.pagent.take().expect("taken once")).expect("distinct principals");
    net.add(cast.user.take().expect("taken once")).expect("distinct principals");
    let leader = cast.leader.clone();
    let boot = net.steps();
    net.run_until(max_steps, |n| n.actor::<PAgent>(&leader).is_some_and(PAgent::finished));
    // Let the closing messages land.
    net.run_until(max_steps.saturating_sub(net.steps() - boot), |n| n.is_quiescent());
    let pagent = net.actor::<PAgent>(&leader).expect("added above");
    let outcome = Outcome {
        steps: net.steps(),
        events: net.events().to_vec(),
        log: net.log().to_vec(),
        anchors: registries
            .iter()
            .map(|p| (p.clone(), net.actor::<RegistryService>(p).expect("added above").node().anchor().entries().to_vec()))
            .collect(),
        report: pagent.report().cloned(),
        phase: pagent.phase(),
    };
    (cast, outcome)
}

/// Waits until no envelope has been delivered for `quiet`, or `limit` passes.
fn settle(net: &LiveNetwork, quiet: Duration, limit: Duration) {
    let deadline = Instant::now() + limit;
    let mut seen = net.events().len();
    let mut since = Instant::now();
    while Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(10));
        let now = net.events().len();
        if now != seen {
            seen = now;
            since = Instant::now();
        } else if since.elapsed() >= quiet {
            return;
        }
    }
}

fn run_socket(mut cast: Cast, limit: Duration) -> Result<(Cast, Outcome), RunError> {
    let mut net = LiveNetwork::new().with_keyring(cast.keys.clone());
    let any = EndpointAddr::Socket("127.0.0.1:0".into());
    let bind = |e: acp_core::transport::TransportError| RunError::Transport(e.to_string());
    let registries = registry_principals(&cast);
    for r in std::mem::take(&mut cast.registries) {
        net.add(r, &any).map_err(bind)?;
    }
    net.add(cast.discovery.take().expect("taken once"), &any).map_err(bind)?;
    for m in std::mem::take(&mut cast.managers) {
        net.add(m, &any).map_err(bind)?;
    }
    for w in std::mem::take(&mut cast.workers) {
        net.add(w, &any).map_err(bind)?;
    }
    net.start();
    settle(&net, Duration::from_millis(300), limit);
    net.add(cast.pagent.take().expect("taken once"), &any).map_err(bind)?;
    net.add(cast.user.take().expect("taken once"), &any).map_err(bind)?;
    net.start();
    let deadline = Instant::now() + limit;
    while Instant::now() < deadline && !net.events().iter().any(|e| e.envelope.msg_type == "task_report") {
        std::thread::sleep(Duration::from_millis(10));
    }
    settle(&net, Duration::from_millis(200), Duration::from_secs(5));
    let events = net.events();
    let log = net.log();
    let actors = net.shutdown();
    let pagent = actors.get(&cast.leader).and_then(|a| actor_ref::<PAgent>(a.as_ref()));
    let outcome = Outcome {
        steps: 0,
        events,
        log,
        anchors: registries
            .iter()
            .filter_map(|p| {
                let r = actor_ref::<RegistryService>(actors.get(p)?.as_ref())?;
                Some((p.clone(), r.node().anchor().entries().to_vec()))
            })
            .collect(),
        report: pagent.and_then(|a| a.report().cloned()),
        phase: pagent.map_or(0, PAgent::phase),
    };
    Ok((cast, outcome))
}
