//! Hosts one party of a scenario as a long-running service. Every process
//! derives the same deployment from a shared seed, so credentials issued in
//! one process verify in another; peers are found through `--peer` entries.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};

use acp_core::aip::PAgent;
use acp_core::id::{Principal, RegistryPath};
use acp_core::transport::{actor_ref, Actor, EndpointAddr, LiveNetwork, LogEntry};

use crate::config::{ConfigError, ScenarioConfig};
use crate::deploy::{build, Cast, Mode};
use crate::run::{run_with_seed, RunError, Transport};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Role {
    Registry(RegistryPath),
    Discovery,
    ToolManager(RegistryPath),
    /// A worker by name, or the personal agent (hosted with its user).
    Agent(String),
}

/// Reads the deployment seed from a key file: 32-byte hex keys, one per
/// line. The first eight bytes of the first key form the seed.
pub fn seed_from_keys(text: &str) -> Result<u64, String> {
    let line = text.lines().map(str::trim).find(|l| !l.is_empty()).ok_or("key file is empty")?;
    let bytes = acp_core::a3ap::sign::strict_hex::<32>(line).ok_or_else(|| format!("not a 32-byte hex key: {line:?}"))?;
    Ok(u64::from_be_bytes(bytes[..8].try_into().expect("eight bytes")))
}

/// `principal=host:port`
pub fn parse_peer(s: &str) -> Result<(Principal, EndpointAddr), String> {
    let (p, addr) = s.split_once('=').ok_or_else(|| format!("expected principal=host:port, got {s:?}"))?;
    let p: Principal = p.parse().map_err(|e| format!("{p}: {e}"))?;
    let addr = if addr.contains("sim:") || addr.contains("socket:") { addr.parse()? } else { EndpointAddr::Socket(addr.into()) };
    Ok((p, addr))
}

fn invalid(s: String) -> RunError {
    RunError::Config(ConfigError::Invalid(s))
}

fn add(net: &mut LiveNetwork, a: impl Actor, listen: &EndpointAddr, out: &mut Vec<(Principal, EndpointAddr)>) -> Result<(), RunError> {
    let p = a.principal();
    let addr = net.add(a, listen).map_err(|e| RunError::Transport(e.to_string()))?;
    out.push((p, addr));
    Ok(())
}

/// Moves the role's actors out of the cast into the network.
fn place(cast: &mut Cast, role: &Role, net: &mut LiveNetwork, listen: &EndpointAddr) -> Result<Vec<(Principal, EndpointAddr)>, RunError> {
    let mut hosted = Vec::new();
    match role {
        Role::Registry(path) => {
            let want: Principal = path.registry_service().into();
            let i = cast.registries.iter().position(|r| r.principal() == want).ok_or_else(|| invalid(format!("no registry at {path}")))?;
            add(net, cast.registries.swap_remove(i), listen, &mut hosted)?;
        }
        Role::Discovery => {
            add(net, cast.discovery.take().expect("built with discovery"), listen, &mut hosted)?;
        }
        Role::ToolManager(path) => {
            let i = cast.managers.iter().position(|m| m.manager().path() == path).ok_or_else(|| invalid(format!("no tool manager at {path}")))?;
            add(net, cast.managers.swap_remove(i), listen, &mut hosted)?;
        }
        Role::Agent(name) => {
            let named = |p: &Principal| p.as_agent().is_some_and(|a| a.agent_name() == name);
            if named(&cast.leader) {
                // The user listens next to its agent on an ephemeral port.
                add(net, cast.pagent.take().expect("built with a personal agent"), listen, &mut hosted)?;
                let any = match listen {
                    EndpointAddr::Socket(a) => EndpointAddr::Socket(format!("{}:0", a.rsplit_once(':').map_or("127.0.0.1", |(h, _)| h))),
                    other => other.clone(),
                };
                add(net, cast.user.take().expect("built with a user"), &any, &mut hosted)?;
            } else {
                let i = cast.workers.iter().position(|w| named(&w.principal())).ok_or_else(|| invalid(format!("no agent named {name}")))?;
                add(net, cast.workers.swap_remove(i), listen, &mut hosted)?;
            }
        }
    }
    Ok(hosted)
}

pub struct ServeOptions {
    pub transport: Transport,
    pub listen: EndpointAddr,
    pub seed: u64,
    pub peers: Vec<(Principal, EndpointAddr)>,
    /// Stop after this long; `None` runs until the process is killed.
    pub run_for: Option<Duration>,
}

/// Hosts `role` and streams its notes to `out`. Returns whether the role
/// ended cleanly: for the personal agent, whether the task completed.
pub fn serve(cfg: &ScenarioConfig, role: &Role, opts: &ServeOptions, out: &mut dyn Write) -> Result<bool, RunError> {
    if opts.transport == Transport::Sim {
        return serve_sim(cfg, role, opts.seed, out);
    }
    let mut cast = build(cfg, opts.seed, Mode::Live)?;
    let mut net = LiveNetwork::new().with_keyring(cast.keys.clone());
    for (p, a) in &opts.peers {
        net.add_peer(p.clone(), a.clone());
    }
    let hosted = place(&mut cast, role, &mut net, &opts.listen)?;
    for (p, a) in &hosted {
        writeln!(out, "listening {p} {a}").ok();
    }
    out.flush().ok();
    net.start();
    let mine: Vec<Principal> = hosted.into_iter().map(|(p, _)| p).collect();
    let leads = mine.contains(&cast.leader);
    let started = Instant::now();
    let mut printed = 0;
    loop {
        std::thread::sleep(Duration::from_millis(50));
        printed = print_new(&net.log(), printed, &mine, out);
        if leads && net.events().iter().any(|e| e.envelope.msg_type == "task_report" && e.envelope.sender == cast.leader) {
            break;
        }
        if opts.run_for.is_some_and(|d| started.elapsed() >= d) {
            break;
        }
    }
    std::thread::sleep(Duration::from_millis(100));
    print_new(&net.log(), printed, &mine, out);
    let actors: BTreeMap<Principal, Box<dyn Actor>> = net.shutdown();
    if !leads {
        return Ok(true);
    }
    let done = actors
        .get(&cast.leader)
        .and_then(|a| actor_ref::<PAgent>(a.as_ref()))
        .and_then(PAgent::report)
        .and_then(|r| r.get("ok"))
        .and_then(acp_core::value::Value::as_bool);
    Ok(done == Some(true))
}

fn print_new(log: &[LogEntry], from: usize, mine: &[Principal], out: &mut dyn Write) -> usize {
    for l in log.iter().skip(from).filter(|l| mine.contains(&l.actor)) {
        writeln!(out, "{}", serde_json::to_string(l).expect("log entries encode")).ok();
    }
    out.flush().ok();
    log.len()
}

/// On the sim bus a lone service has no peers, so the whole scenario runs
/// in-process and only the role's notes are shown.
fn serve_sim(cfg: &ScenarioConfig, role: &Role, seed: u64, out: &mut dyn Write) -> Result<bool, RunError> {
    let (t, ok) = match run_with_seed(cfg, seed, Transport::Sim) {
        Ok(t) => (t, true),
        Err(RunError::ScenarioFailed { transcript, .. }) => (*transcript, false),
        Err(e) => return Err(e),
    };
    let shows = |p: &Principal| match role {
        Role::Registry(path) => *p == Principal::from(path.registry_service()),
        Role::Discovery => *p == acp_core::adp::discovery_principal(),
        Role::ToolManager(path) => *p == acp_core::atp::tool_manager_principal(path),
        Role::Agent(name) => p.as_agent().is_some_and(|a| a.agent_name() == name),
    };
    let mine: Vec<Principal> = t.log.iter().map(|l| l.actor.clone()).filter(|p| shows(p)).collect();
    if mine.is_empty() {
        return Err(invalid(format!("{role:?} is not part of the scenario")));
    }
    print_new(&t.log, 0, &mine, out);
    Ok(ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_come_from_the_first_key() {
        let k = format!("{}\n{}\n", "0000000000000001".to_string() + &"ab".repeat(24), "cd".repeat(32));
        assert_eq!(seed_from_keys(&k), Ok(1));
        assert!(seed_from_keys("\n").is_err());
        assert!(seed_from_keys("abcd").is_err());
    }

    #[test]
    fn peers_parse() {
        let (p, a) = parse_peer("svc://registry/root=127.0.0.1:7000").unwrap();
        assert_eq!(p.to_string(), "svc://registry/root");
        assert_eq!(a, EndpointAddr::Socket("127.0.0.1:7000".into()));
        assert!(parse_peer("svc://registry/root").is_err());
    }
}
