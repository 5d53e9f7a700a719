//! Builds every party of a scenario from its config: registries, discovery,
//! tool managers, workers, the personal agent and the user.

use std::collections::BTreeMap;

use acp_core::a3ap::{Identity, KeyRing, Ledger, TrustRoots};
use acp_core::adp::{discovery_principal, Catalog, DiscoveryService, SynonymTable};
use acp_core::aip::{PAgent, PAgentConfig, ScriptedReplies, UserAgent, WorkerAgent};
use acp_core::arp::{RegistryNode, RegistryService};
use acp_core::atp::{tool_manager_principal, ConnectorFactory, ToolDescriptor, ToolManager, ToolManagerService};
use acp_core::descriptor::{CapabilityDescriptor, Facet};
use acp_core::id::{Principal, RegistryPath};
use acp_core::testkit::Org;

use crate::config::{ConfigError, ScenarioConfig};

/// How long infrastructure waits for a handshake to finish.
const HANDSHAKE_TIMEOUT: u64 = 50;

/// Which connectors tool managers may build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sim,
    Live,
}

/// Every party of one deployment, not yet attached to a network.
pub struct Cast {
    /// Issues further identities in the same deployment.
    pub org: Org,
    pub keys: KeyRing,
    pub roots: TrustRoots,
    pub ledger: Ledger,
    pub registries: Vec<RegistryService>,
    pub discovery: Option<DiscoveryService>,
    pub managers: Vec<ToolManagerService>,
    pub workers: Vec<WorkerAgent>,
    pub pagent: Option<PAgent>,
    pub user: Option<UserAgent>,
    pub leader: Principal,
    pub user_principal: Principal,
}

fn invalid(e: impl std::fmt::Display) -> ConfigError {
    ConfigError::Invalid(e.to_string())
}

/// Derives every identity from `seed` and wires the parties together.
pub fn build(cfg: &ScenarioConfig, seed: u64, mode: Mode) -> Result<Cast, ConfigError> {
    let paths = cfg.registry_paths()?;
    let names: Vec<&str> = cfg.registries.iter().map(String::as_str).collect();
    let org = Org::new(seed, &names);
    let time_scale = match mode {
        Mode::Sim => 1,
        Mode::Live => 20,
    };

    let mut nodes: BTreeMap<RegistryPath, RegistryNode> =
        paths.iter().map(|p| (p.clone(), RegistryNode::new(p.clone(), org.roots().clone()))).collect();
    for p in &paths {
        if let Some(parent) = p.parent() {
            let seg = p.segments().last().expect("child paths have a last segment").clone();
            nodes.get_mut(&parent).expect("validated parent").add_child(&seg).map_err(invalid)?;
        }
    }
    let mut catalog = Catalog::new();
    let mut registries = Vec::new();
    for (p, node) in nodes {
        let id = org.registry(&p.to_string());
        catalog.trust(p.registry_service(), id.public_key());
        registries.push(RegistryService::new(id, node, HANDSHAKE_TIMEOUT * time_scale));
    }
    let root = cfg.registries[0].as_str();
    let discovery = DiscoveryService::new(
        org.service(&discovery_principal().to_string(), root),
        catalog,
        SynonymTable::new(),
        org.roots().clone(),
        HANDSHAKE_TIMEOUT * time_scale,
    );

    let ledger = Ledger::new();
    let factory = match mode {
        Mode::Sim => ConnectorFactory::sim(),
        Mode::Live => ConnectorFactory::live(),
    };
    let mut tool_managers: BTreeMap<RegistryPath, ToolManager> = BTreeMap::new();
    for m in &cfg.tool_managers {
        let path: RegistryPath = m.path.parse().map_err(invalid)?;
        let mut tm = ToolManager::new(path.clone(), factory.clone());
        for r in &m.resources {
            tm.attach_resource(cfg.resource(r)?).map_err(invalid)?;
        }
        tool_managers.insert(path, tm);
    }
    for m in &cfg.tool_managers {
        let path: RegistryPath = m.path.parse().map_err(invalid)?;
        for t in &m.tools {
            let d = ToolDescriptor {
                tool_id: t.tool_id.clone(),
                provider: tool_manager_principal(&path),
                semantic_tags: t.semantic_tags.clone(),
                operation: t.operation.clone(),
                side_effecting: t.side_effecting,
                cost_tokens_per_call: t.cost_tokens_per_call,
                binding: t.binding.clone(),
            };
            tool_managers.get_mut(&path).expect("built above").register_tool(d.clone()).map_err(invalid)?;
            // Visible upwards through each manager that can forward back down.
            let mut up = path.parent();
            while let Some(p) = up {
                let Some(parent) = tool_managers.get_mut(&p) else { break };
                parent.announce(&path, d.clone()).map_err(invalid)?;
                up = p.parent();
            }
        }
    }
    let managers = tool_managers
        .into_values()
        .map(|tm| {
            let principal = tool_manager_principal(tm.path());
            let id = org.service(&principal.to_string(), &tm.path().to_string());
            ToolManagerService::new(id, tm, org.roots().clone(), ledger.clone(), HANDSHAKE_TIMEOUT * time_scale)
        })
        .collect();

    let mut workers = Vec::new();
    for a in &cfg.agents {
        let id = org.agent(&a.path, &a.name);
        let agent = id.principal.as_agent().expect("agents have agent ids").clone();
        let tags: Vec<&str> = a.tags.iter().map(String::as_str).collect();
        let mut d = CapabilityDescriptor::new(agent, &tags);
        d.external.action = Facet::new(&a.summary, &tags);
        let mut w = WorkerAgent::new(id, cfg.scripts[&a.script].clone(), org.roots().clone(), HANDSHAKE_TIMEOUT * time_scale)
            .registering(d);
        if let Some(t) = &a.tools {
            w = w.using_tools(tool_manager_principal(&t.parse().map_err(invalid)?));
        }
        workers.push(w);
    }

    let leader_id: Identity = org.agent(&cfg.pagent.path, &cfg.pagent.name);
    let user_id: Identity = org.agent(&cfg.pagent.path, &cfg.user.name);
    let registry: RegistryPath = cfg.pagent.path.parse().map_err(invalid)?;
    let pcfg = PAgentConfig {
        registry: registry.registry_service().into(),
        discovery: discovery_principal(),
        user: user_id.principal.clone(),
        timeout: cfg.pagent.timeout * time_scale,
        discover_limit: cfg.pagent.discover_limit,
    };
    let (leader, user_principal) = (leader_id.principal.clone(), user_id.principal.clone());
    let pagent = PAgent::new(leader_id, cfg.goal.clone(), pcfg, org.roots().clone());
    let user = UserAgent::new(user_id, ScriptedReplies(cfg.user.replies.clone()));

    Ok(Cast {
        keys: org.keyring().clone(),
        roots: org.roots().clone(),
        org,
        ledger,
        registries,
        discovery: Some(discovery),
        managers,
        workers,
        pagent: Some(pagent),
        user: Some(user),
        leader,
        user_principal,
    })
}
