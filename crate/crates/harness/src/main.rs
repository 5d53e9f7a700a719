use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use acp_core::a3ap::{Amount, BillingPolicy, LedgerSnapshot};
use acp_core::adp::{discover, DiscoveryService, Query};
use acp_core::aip::{WorkerAgent, WorkerScript};
use acp_core::descriptor::{validate_descriptor, CapabilityDescriptor};
use acp_core::id::{Principal, RegistryPath};
use acp_core::transport::EndpointAddr;
use acp_harness::deploy::{build, Mode};
use acp_harness::run::boot_sim;
use acp_harness::serve::{parse_peer, seed_from_keys, serve, Role, ServeOptions};
use acp_harness::{replay, run_with_seed, RunError, ScenarioConfig, Transcript, Transport};
use clap::{Args, Parser, Subcommand};
use rand::RngCore;

const BUNDLED: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/restaurant.toml");

#[derive(Parser)]
#[command(name = "acp", about = "Run, replay and host agent collaboration scenarios")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario and write its transcript.
    Run {
        #[arg(long, default_value = BUNDLED)]
        scenario: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "sim")]
        transport: Transport,
    },
    /// Re-validate a transcript offline.
    Replay { transcript: PathBuf },
    /// Host a registry server.
    Registry {
        #[arg(long, default_value = "root")]
        path: RegistryPath,
        #[command(flatten)]
        host: HostArgs,
    },
    /// Host the discovery service.
    Discovery {
        #[command(flatten)]
        host: HostArgs,
    },
    /// Host a tool manager.
    Toolmgr {
        #[arg(long, default_value = "root")]
        path: RegistryPath,
        #[command(flatten)]
        host: HostArgs,
    },
    /// Host an agent from the scenario roster.
    Agent {
        #[arg(long)]
        name: String,
        #[command(flatten)]
        host: HostArgs,
    },
    /// Write fresh 32-byte hex keys, one per line.
    Keygen {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Compute what a payer owes from a ledger or transcript file.
    Invoice {
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long)]
        payer: Principal,
        /// Overrides the transcript's price per token.
        #[arg(long)]
        price_per_token: Option<Amount>,
        #[arg(long)]
        price_per_call: Option<Amount>,
    },
    /// Register a capability descriptor with its registry and print the result.
    Register {
        #[arg(long)]
        file: PathBuf,
        #[command(flatten)]
        deployment: DeploymentArgs,
    },
    /// Query the catalog of a freshly booted deployment.
    Discover {
        #[arg(long = "require", required = true)]
        require: Vec<String>,
        #[arg(long, default_value_t = 10)]
        limit: usize,
        #[command(flatten)]
        deployment: DeploymentArgs,
    },
}

#[derive(Args)]
struct DeploymentArgs {
    #[arg(long, default_value = BUNDLED)]
    scenario: PathBuf,
    /// Key file whose first key seeds every identity.
    #[arg(long)]
    keys: Option<PathBuf>,
}

#[derive(Args)]
struct HostArgs {
    #[command(flatten)]
    deployment: DeploymentArgs,
    #[arg(long, default_value = "socket")]
    transport: Transport,
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: String,
    /// Where another process hosts a principal: `principal=host:port`.
    #[arg(long = "peer", value_parser = parse_peer)]
    peers: Vec<(Principal, EndpointAddr)>,
    /// Stop after this many seconds.
    #[arg(long)]
    for_secs: Option<u64>,
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("acp: {msg}");
    ExitCode::from(2)
}

fn load(d: &DeploymentArgs) -> Result<(ScenarioConfig, u64), String> {
    let cfg = ScenarioConfig::load(&d.scenario).map_err(|e| e.to_string())?;
    let seed = match &d.keys {
        None => cfg.seed,
        Some(p) => seed_from_keys(&std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?)?,
    };
    Ok((cfg, seed))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { scenario, seed, out, transport } => run(scenario, seed, out, transport),
        Cmd::Replay { transcript } => replay_file(transcript),
        Cmd::Registry { path, host } => host_role(Role::Registry(path), host),
        Cmd::Discovery { host } => host_role(Role::Discovery, host),
        Cmd::Toolmgr { path, host } => host_role(Role::ToolManager(path), host),
        Cmd::Agent { name, host } => host_role(Role::Agent(name), host),
        Cmd::Keygen { out, count } => keygen(out, count),
        Cmd::Invoice { ledger, payer, price_per_token, price_per_call } => invoice(ledger, payer, price_per_token, price_per_call),
        Cmd::Register { file, deployment } => register(file, deployment),
        Cmd::Discover { require, limit, deployment } => discover_cmd(require, limit, deployment),
    }
}

fn run(scenario: PathBuf, seed: Option<u64>, out: Option<PathBuf>, transport: Transport) -> ExitCode {
    let cfg = match ScenarioConfig::load(&scenario) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let (transcript, code) = match run_with_seed(&cfg, seed.unwrap_or(cfg.seed), transport) {
        Ok(t) => {
            println!("completed: {} phases, {} messages, hash {}", t.phases().len(), t.events.len(), t.transcript_hash);
            (t, ExitCode::SUCCESS)
        }
        Err(RunError::ScenarioFailed { phase, cause, transcript }) => {
            println!("failed in phase {phase}: {cause}");
            (*transcript, ExitCode::FAILURE)
        }
        Err(e) => return fail(e),
    };
    if let Some(out) = out {
        if let Err(e) = std::fs::write(&out, transcript.to_json()) {
            return fail(format!("{}: {e}", out.display()));
        }
    }
    code
}

fn replay_file(path: PathBuf) -> ExitCode {
    let t = match std::fs::read_to_string(&path).map_err(|e| e.to_string()).and_then(|s| Transcript::from_json(&s)) {
        Ok(t) => t,
        Err(e) => return fail(format!("{}: {e}", path.display())),
    };
    let v = replay(&t);
    for x in &v.violations {
        println!("violation: {x}");
    }
    if v.clean() {
        println!("clean: {} messages, phases {:?}, hash {}", t.events.len(), t.phases(), t.transcript_hash);
        ExitCode::SUCCESS
    } else {
        println!("{} violation(s)", v.violations.len());
        ExitCode::FAILURE
    }
}

fn host_role(role: Role, host: HostArgs) -> ExitCode {
    let (cfg, seed) = match load(&host.deployment) {
        Ok(x) => x,
        Err(e) => return fail(e),
    };
    let listen = match host.transport {
        Transport::Socket => EndpointAddr::Socket(host.listen),
        Transport::Sim => EndpointAddr::Sim(host.listen),
    };
    let opts = ServeOptions {
        transport: host.transport,
        listen,
        seed,
        peers: host.peers,
        run_for: host.for_secs.map(Duration::from_secs),
    };
    match serve(&cfg, &role, &opts, &mut std::io::stdout()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => fail(e),
    }
}

fn keygen(out: Option<PathBuf>, count: usize) -> ExitCode {
    let mut text = String::new();
    for _ in 0..count.max(1) {
        let mut k = [0u8; 32];
        rand::rngs::OsRng.fill_bytes(&mut k);
        text.push_str(&hex::encode(k));
        text.push('\n');
    }
    match out {
        None => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Some(p) => match std::fs::write(&p, text) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(format!("{}: {e}", p.display())),
        },
    }
}

fn invoice(path: PathBuf, payer: Principal, ppt: Option<Amount>, ppc: Option<Amount>) -> ExitCode {
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) => return fail(format!("{}: {e}", path.display())),
    };
    let (ledger, billing): (LedgerSnapshot, Option<BillingPolicy>) = match Transcript::from_json(&text) {
        Ok(t) => (t.ledger, Some(t.billing)),
        Err(_) => match serde_json::from_str(&text) {
            Ok(l) => (l, None),
            Err(e) => return fail(format!("{}: neither a transcript nor a ledger: {e}", path.display())),
        },
    };
    let policy = match (billing, ppt, ppc) {
        (_, Some(t), Some(c)) => BillingPolicy { price_per_token: t, price_per_call: c },
        (Some(b), t, c) => BillingPolicy { price_per_token: t.unwrap_or(b.price_per_token), price_per_call: c.unwrap_or(b.price_per_call) },
        (None, _, _) => return fail("a bare ledger needs --price-per-token and --price-per-call"),
    };
    println!("{}", ledger.invoice(&policy, &payer));
    ExitCode::SUCCESS
}

fn register(file: PathBuf, d: DeploymentArgs) -> ExitCode {
    let (cfg, seed) = match load(&d) {
        Ok(x) => x,
        Err(e) => return fail(e),
    };
    let descriptor: CapabilityDescriptor = match std::fs::read_to_string(&file)
        .map_err(|e| e.to_string())
        .and_then(|s| serde_json::from_str(&s).map_err(|e| e.to_string()))
    {
        Ok(x) => x,
        Err(e) => return fail(format!("{}: {e}", file.display())),
    };
    let report = validate_descriptor(&descriptor);
    for v in &report.violations {
        println!("descriptor: {}: {}", v.path, v.detail);
    }
    let path = descriptor.agent.registry_path().to_string();
    if !cfg.registries.contains(&path) {
        return fail(format!("no registry at {path} in {}", d.scenario.display()));
    }
    let mut cast = match build(&cfg, seed, Mode::Sim) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let id = cast.org.agent(&path, descriptor.agent.agent_name());
    let me = id.principal.clone();
    let worker = WorkerAgent::new(id, WorkerScript::default(), cast.roots.clone(), 50).registering(descriptor);
    let mut net = boot_sim(&mut cast, seed);
    net.add(worker).expect("new principal");
    net.run_to_quiescence(10_000);
    let Some(result) = net.events().iter().find(|e| e.envelope.msg_type == "register_result" && e.envelope.recipient == me) else {
        return fail("the registry never answered");
    };
    let payload = acp_core::value::Value::Map(result.envelope.payload.clone());
    println!("{}", serde_json::to_string_pretty(&payload).expect("payloads encode"));
    if result.envelope.get("ok").and_then(acp_core::value::Value::as_bool) == Some(true) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn discover_cmd(require: Vec<String>, limit: usize, d: DeploymentArgs) -> ExitCode {
    let (cfg, seed) = match load(&d) {
        Ok(x) => x,
        Err(e) => return fail(e),
    };
    let mut cast = match build(&cfg, seed, Mode::Sim) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    let net = boot_sim(&mut cast, seed);
    let catalog = net.actor::<DiscoveryService>(&acp_core::adp::discovery_principal()).expect("booted").catalog();
    let tags: Vec<&str> = require.iter().map(String::as_str).collect();
    let results = discover(catalog, &Query::requiring(&tags).with_limit(limit));
    let mut out = std::io::stdout().lock();
    for r in &results {
        writeln!(out, "{:.4} {}", r.score, r.agent).ok();
    }
    if results.is_empty() {
        writeln!(out, "no agent offers {}", require.join(", ")).ok();
    }
    ExitCode::SUCCESS
}
