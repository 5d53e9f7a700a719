//! Tool managers and their tree. A tool registered at a manager is visible
//! from that manager and from every ancestor; lookups from an ancestor
//! forward down one hop per level.

use std::collections::BTreeMap;

use super::connector::{Connector, ConnectorFactory};
use super::tool::{check_descriptor, ResourceDescriptor, ToolDescriptor, ToolError};
use crate::id::RegistryPath;
use crate::value::Value;

/// Result of one successful call.
#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub tool_id: String,
    pub output: Value,
    pub cost_tokens: u64,
    pub hops: usize,
}

/// Anything tools can be described and invoked through.
pub trait ToolResolver {
    fn describe(&self, tool_id: &str) -> Option<ToolDescriptor>;
    fn invoke(&mut self, tool_id: &str, args: &Value) -> Result<Invocation, ToolError>;
}

/// Where a manager finds a tool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Located<'a> {
    Local(&'a ToolDescriptor),
    /// Registered at `owner`, reachable through the named child.
    Below { child: &'a str, owner: &'a RegistryPath, descriptor: &'a ToolDescriptor },
}

impl Located<'_> {
    pub fn descriptor(&self) -> &ToolDescriptor {
        match self {
            Located::Local(d) | Located::Below { descriptor: d, .. } => d,
        }
    }
}

pub struct ToolManager {
    path: RegistryPath,
    tools: BTreeMap<String, ToolDescriptor>,
    below: BTreeMap<String, (String, RegistryPath, ToolDescriptor)>,
    resources: BTreeMap<String, (ResourceDescriptor, Box<dyn Connector>)>,
    factory: ConnectorFactory,
}

impl std::fmt::Debug for ToolManager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ToolManager")
            .field("path", &self.path)
            .field("tools", &self.tools.keys().collect::<Vec<_>>())
            .field("below", &self.below.keys().collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

impl ToolManager {
    pub fn new(path: RegistryPath, factory: ConnectorFactory) -> Self {
        Self { path, tools: BTreeMap::new(), below: BTreeMap::new(), resources: BTreeMap::new(), factory }
    }

    pub fn path(&self) -> &RegistryPath {
        &self.path
    }

    pub fn tools(&self) -> impl Iterator<Item = &ToolDescriptor> {
        self.tools.values()
    }

    pub fn attach_resource(&mut self, r: ResourceDescriptor) -> Result<String, ToolError> {
        if self.resources.contains_key(&r.resource_id) {
            return Err(ToolError::DuplicateResource(r.resource_id));
        }
        let conn = self.factory.build(&r.resource_id, &r.connector)?;
        let id = r.resource_id.clone();
        self.resources.insert(id.clone(), (r, conn));
        Ok(id)
    }

    /// Attaches a resource served by an already built connector.
    pub fn attach_connector(&mut self, r: ResourceDescriptor, conn: Box<dyn Connector>) -> Result<String, ToolError> {
        if self.resources.contains_key(&r.resource_id) {
            return Err(ToolError::DuplicateResource(r.resource_id));
        }
        let id = r.resource_id.clone();
        self.resources.insert(id.clone(), (r, conn));
        Ok(id)
    }

    fn taken(&self, tool_id: &str) -> bool {
        self.tools.contains_key(tool_id) || self.below.contains_key(tool_id)
    }

    pub fn register_tool(&mut self, d: ToolDescriptor) -> Result<String, ToolError> {
        check_descriptor(&d)?;
        if self.taken(&d.tool_id) {
            return Err(ToolError::DuplicateTool(d.tool_id));
        }
        let (res, _) = self
            .resources
            .get(&d.binding.resource)
            .ok_or_else(|| ToolError::UnknownResource(d.binding.resource.clone()))?;
        if res.read_only && d.binding.action.writes() {
            return Err(ToolError::BadSchema(format!("{} writes to read-only resource {}", d.tool_id, res.resource_id)));
        }
        let id = d.tool_id.clone();
        self.tools.insert(id.clone(), d);
        Ok(id)
    }

    /// Records a tool registered at `owner`, somewhere under this manager.
    pub fn announce(&mut self, owner: &RegistryPath, d: ToolDescriptor) -> Result<(), ToolError> {
        if !self.path.is_proper_prefix_of(owner) {
            return Err(ToolError::failure("bad_route", format!("{owner} is not below {}", self.path)));
        }
        if self.taken(&d.tool_id) {
            return Err(ToolError::DuplicateTool(d.tool_id));
        }
        let child = owner.segments()[self.path.segments().len()].clone();
        self.below.insert(d.tool_id.clone(), (child, owner.clone(), d));
        Ok(())
    }

    pub fn locate(&self, tool_id: &str) -> Option<Located<'_>> {
        if let Some(d) = self.tools.get(tool_id) {
            return Some(Located::Local(d));
        }
        self.below.get(tool_id).map(|(child, owner, d)| Located::Below { child, owner, descriptor: d })
    }

    /// Every visible tool carrying `tag`, ordered by tool id.
    pub fn find_by_tag(&self, tag: &str) -> Vec<&ToolDescriptor> {
        let mut v: Vec<&ToolDescriptor> = self
            .tools
            .values()
            .chain(self.below.values().map(|(_, _, d)| d))
            .filter(|d| d.semantic_tags.contains(tag))
            .collect();
        v.sort_by(|a, b| a.tool_id.cmp(&b.tool_id));
        v
    }

    /// Runs a tool registered at this manager.
    pub fn invoke_local(&mut self, tool_id: &str, args: &Value) -> Result<Invocation, ToolError> {
        let d = self.tools.get(tool_id).ok_or_else(|| ToolError::UnknownTool(tool_id.to_string()))?;
        if let Some(v) = d.operation.input.check(args, "").first() {
            return Err(ToolError::args(v));
        }
        let Value::Map(map) = args else { unreachable!("record schema only admits maps") };
        let (_, conn) = self
            .resources
            .get_mut(&d.binding.resource)
            .ok_or_else(|| ToolError::UnknownResource(d.binding.resource.clone()))?;
        let output = conn.execute(&d.binding.action, map)?;
        if let Some(v) = d.operation.output.check(&output, "").first() {
            return Err(ToolError::output(v));
        }
        Ok(Invocation { tool_id: tool_id.to_string(), output, cost_tokens: d.cost_tokens_per_call as u64, hops: 0 })
    }
}

/// Resolves only tools registered at this manager.
impl ToolResolver for ToolManager {
    fn describe(&self, tool_id: &str) -> Option<ToolDescriptor> {
        self.tools.get(tool_id).cloned()
    }

    fn invoke(&mut self, tool_id: &str, args: &Value) -> Result<Invocation, ToolError> {
        self.invoke_local(tool_id, args)
    }
}

/// All managers of one process, keyed by registry path.
#[derive(Debug, Default)]
pub struct ToolTree {
    managers: BTreeMap<RegistryPath, ToolManager>,
}

impl ToolTree {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a manager; its parent, if any, must already be present.
    pub fn insert(&mut self, m: ToolManager) -> Result<(), ToolError> {
        if let Some(parent) = m.path.parent() {
            if !self.managers.contains_key(&parent) {
                return Err(ToolError::failure("no_parent", format!("{} has no manager at {parent}", m.path)));
            }
        }
        self.managers.insert(m.path.clone(), m);
        Ok(())
    }

    pub fn manager(&self, path: &RegistryPath) -> Option<&ToolManager> {
        self.managers.get(path)
    }

    pub fn manager_mut(&mut self, path: &RegistryPath) -> Option<&mut ToolManager> {
        self.managers.get_mut(path)
    }

    /// Registers at `at` and announces the tool to every ancestor.
    pub fn register_tool(&mut self, at: &RegistryPath, d: ToolDescriptor) -> Result<String, ToolError> {
        let mut ancestors = Vec::new();
        let mut cur = at.clone();
        while let Some(p) = cur.parent() {
            if self.managers.get(&p).is_some_and(|m| m.taken(&d.tool_id)) {
                return Err(ToolError::DuplicateTool(d.tool_id));
            }
            ancestors.push(p.clone());
            cur = p;
        }
        let m = self.managers.get_mut(at).ok_or_else(|| ToolError::failure("no_manager", at.to_string()))?;
        let id = m.register_tool(d.clone())?;
        for p in ancestors {
            if let Some(m) = self.managers.get_mut(&p) {
                m.announce(at, d.clone())?;
            }
        }
        Ok(id)
    }

    /// Finds the owning manager of `tool_id` starting at `start`.
    pub fn locate(&self, start: &RegistryPath, tool_id: &str) -> Result<(RegistryPath, usize), ToolError> {
        let mut at = start.clone();
        let mut hops = 0;
        loop {
            let m = self.managers.get(&at).ok_or_else(|| ToolError::UnknownTool(tool_id.to_string()))?;
            match m.locate(tool_id) {
                Some(Located::Local(_)) => return Ok((at, hops)),
                Some(Located::Below { child, .. }) => {
                    at = at.child(child).map_err(|e| ToolError::failure("bad_route", e.to_string()))?;
                    hops += 1;
                }
                None => return Err(ToolError::UnknownTool(tool_id.to_string())),
            }
        }
    }

    /// A resolver that starts every lookup at `start`.
    pub fn at(&mut self, start: RegistryPath) -> TreeCursor<'_> {
        TreeCursor { tree: self, start }
    }
}

pub struct TreeCursor<'a> {
    tree: &'a mut ToolTree,
    start: RegistryPath,
}

impl ToolResolver for TreeCursor<'_> {
    fn describe(&self, tool_id: &str) -> Option<ToolDescriptor> {
        self.tree.managers.get(&self.start)?.locate(tool_id).map(|l| l.descriptor().clone())
    }

    fn invoke(&mut self, tool_id: &str, args: &Value) -> Result<Invocation, ToolError> {
        let (owner, hops) = self.tree.locate(&self.start, tool_id)?;
        let m = self.tree.managers.get_mut(&owner).expect("located manager exists");
        let mut inv = m.invoke_local(tool_id, args)?;
        inv.hops = hops;
        Ok(inv)
    }
}
