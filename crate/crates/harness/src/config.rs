//! Scenario configuration, read from TOML. Fixture paths are relative to
//! the config file.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use acp_core::a3ap::BillingPolicy;
use acp_core::aip::{Goal, UserReply, WorkerScript};
use acp_core::atp::{ConnectorSpec, FixtureFile, ResourceDescriptor, ResourceKind, ToolBinding};
use acp_core::id::RegistryPath;
use acp_core::schema::OperationSig;
use acp_core::value::{to_value, Map};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    /// Sim steps allowed after the personal agent starts.
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
    pub registries: Vec<String>,
    pub billing: BillingPolicy,
    /// Fixture files by key, relative to `base_dir`.
    #[serde(default)]
    pub fixtures: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub tool_managers: Vec<ManagerSpec>,
    pub agents: Vec<AgentSpec>,
    pub scripts: BTreeMap<String, WorkerScript>,
    pub pagent: PAgentSpec,
    pub user: UserSpec,
    pub goal: Goal,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_max_steps() -> u64 {
    5_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManagerSpec {
    pub path: String,
    #[serde(default)]
    pub resources: Vec<ResourceSpec>,
    #[serde(default)]
    pub tools: Vec<ToolSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceSpec {
    pub resource_id: String,
    pub kind: ResourceKind,
    pub connector: String,
    /// Key into `fixtures` for `fixture` connectors.
    #[serde(default)]
    pub fixture: Option<String>,
    #[serde(default)]
    pub config: Map,
    #[serde(default)]
    pub read_only: bool,
}

/// A tool as configured; the provider is the manager it is registered at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolSpec {
    pub tool_id: String,
    pub semantic_tags: BTreeSet<String>,
    pub operation: OperationSig,
    #[serde(default)]
    pub side_effecting: bool,
    #[serde(default)]
    pub cost_tokens_per_call: i64,
    pub binding: ToolBinding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub name: String,
    pub path: String,
    pub tags: Vec<String>,
    pub script: String,
    /// Registry path of the tool manager the agent calls tools through.
    #[serde(default)]
    pub tools: Option<String>,
    #[serde(default)]
    pub summary: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PAgentSpec {
    pub name: String,
    pub path: String,
    /// Sim steps (or milliseconds live) to wait on any other party.
    #[serde(default = "default_timeout")]
    pub timeout: u64,
    #[serde(default = "default_limit")]
    pub discover_limit: usize,
}

fn default_timeout() -> u64 {
    200
}

fn default_limit() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserSpec {
    pub name: String,
    /// Canned replies by prompt id.
    #[serde(default)]
    pub replies: BTreeMap<String, UserReply>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConfigError {
    Io(String),
    Parse(String),
    Invalid(String),
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Io(e) => write!(f, "cannot read scenario: {e}"),
            ConfigError::Parse(e) => write!(f, "cannot parse scenario: {e}"),
            ConfigError::Invalid(e) => write!(f, "invalid scenario: {e}"),
        }
    }
}

impl std::error::Error for ConfigError {}

impl ScenarioConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base_dir: PathBuf) -> Result<Self, ConfigError> {
        let mut cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.base_dir = base_dir;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a fixture by key.
    pub fn fixture(&self, key: &str) -> Result<FixtureFile, ConfigError> {
        let rel = self.fixtures.get(key).ok_or_else(|| ConfigError::Invalid(format!("unknown fixture {key:?}")))?;
        let path = self.base_dir.join(rel);
        let text = std::fs::read_to_string(&path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        let file: FixtureFile =
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
        file.check().map_err(|e| ConfigError::Invalid(format!("fixture {key}: {e}")))?;
        Ok(file)
    }

    /// The resource as a tool manager attaches it, with fixture records inlined.
    pub fn resource(&self, r: &ResourceSpec) -> Result<ResourceDescriptor, ConfigError> {
        let mut config = r.config.clone();
        if let Some(key) = &r.fixture {
            let file = self.fixture(key)?;
            config.insert("inline".into(), to_value(&file).map_err(|e| ConfigError::Invalid(e.to_string()))?);
        }
        Ok(ResourceDescriptor {
            resource_id: r.resource_id.clone(),
            kind: r.kind,
            connector: ConnectorSpec { id: r.connector.clone(), config },
            read_only: r.read_only,
        })
    }

    pub fn registry_paths(&self) -> Result<Vec<RegistryPath>, ConfigError> {
        self.registries
            .iter()
            .map(|p| p.parse().map_err(|e| ConfigError::Invalid(format!("registry {p:?}: {e}"))))
            .collect()
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |s: String| Err(ConfigError::Invalid(s));
        let paths = self.registry_paths()?;
        let known: BTreeSet<&RegistryPath> = paths.iter().collect();
        if known.len() != paths.len() {
            return bad("duplicate registry path".into());
        }
        for p in &paths {
            if let Some(parent) = p.parent() {
                if !known.contains(&parent) {
                    return bad(format!("registry {p} has no parent registry {parent}"));
                }
            }
        }
        let in_tree = |p: &str| p.parse::<RegistryPath>().is_ok_and(|p| known.contains(&p));
        let mut names = BTreeSet::new();
        for a in &self.agents {
            if !names.insert(a.name.as_str()) {
                return bad(format!("agent {} listed twice", a.name));
            }
            if !in_tree(&a.path) {
                return bad(format!("agent {} sits at unknown registry {}", a.name, a.path));
            }
            if !self.scripts.contains_key(&a.script) {
                return bad(format!("agent {} uses unknown script {}", a.name, a.script));
            }
            if let Some(t) = &a.tools {
                if !self.tool_managers.iter().any(|m| &m.path == t) {
                    return bad(format!("agent {} uses unknown tool manager {t}", a.name));
                }
            }
        }
        for n in [&self.pagent.name, &self.user.name] {
            if !names.insert(n.as_str()) {
                return bad(format!("{n} listed twice"));
            }
        }
        if !in_tree(&self.pagent.path) {
            return bad(format!("personal agent sits at unknown registry {}", self.pagent.path));
        }
        let mut managers = BTreeSet::new();
        for m in &self.tool_managers {
            if !in_tree(&m.path) || !managers.insert(m.path.as_str()) {
                return bad(format!("tool manager at {} is unknown or repeated", m.path));
            }
            for r in &m.resources {
                if let Some(f) = &r.fixture {
                    if !self.fixtures.contains_key(f) {
                        return bad(format!("resource {} uses unknown fixture {f}", r.resource_id));
                    }
                }
            }
        }
        if self.goal.sub_goals.is_empty() {
            return bad("goal has no sub-goals".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundled() -> PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios/restaurant.toml")
    }

    #[test]
    fn bundled_scenario_loads() {
        let cfg = ScenarioConfig::load(&bundled()).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.goal.sub_goals.len(), 4);
        for m in &cfg.tool_managers {
            for r in &m.resources {
                cfg.resource(r).unwrap();
            }
        }
    }

    #[test]
    fn unknown_script_is_rejected() {
        let text = std::fs::read_to_string(bundled()).unwrap().replace("script = \"info\"", "script = \"nobody\"");
        let e = ScenarioConfig::parse(&text, bundled().parent().unwrap().into()).unwrap_err();
        assert!(matches!(e, ConfigError::Invalid(ref s) if s.contains("nobody")), "{e}");
    }

    #[test]
    fn duplicate_roster_name_is_rejected() {
        let text = std::fs::read_to_string(bundled()).unwrap().replace("name = \"travel\"", "name = \"info\"");
        let e = ScenarioConfig::parse(&text, bundled().parent().unwrap().into()).unwrap_err();
        assert!(matches!(e, ConfigError::Invalid(ref s) if s.contains("twice")), "{e}");
    }

    #[test]
    fn missing_fixture_file_is_reported() {
        let mut cfg = ScenarioConfig::load(&bundled()).unwrap();
        cfg.fixtures.insert("restaurants".into(), "fixtures/nowhere.json".into());
        assert!(matches!(cfg.fixture("restaurants"), Err(ConfigError::Io(_))));
    }
}
