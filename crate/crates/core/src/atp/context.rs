//! Per-task context: versioned entries with the step that wrote them.
//! Reads are filtered to writes a step is allowed to see.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::value::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextEntry {
    pub value: Value,
    /// None for values placed before any step ran.
    pub written_by: Option<String>,
    pub version: u64,
}

/// One line of the write history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextWrite {
    pub key: String,
    pub version: u64,
    pub written_by: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Context {
    pub context_id: String,
    pub scope: String,
    entries: BTreeMap<String, Vec<ContextEntry>>,
    history: Vec<ContextWrite>,
}

impl Context {
    pub fn new(context_id: &str, scope: &str) -> Self {
        Self { context_id: context_id.to_string(), scope: scope.to_string(), entries: BTreeMap::new(), history: Vec::new() }
    }

    fn push(&mut self, key: &str, value: Value, written_by: Option<&str>) -> u64 {
        let list = self.entries.entry(key.to_string()).or_default();
        let version = list.last().map_or(1, |e| e.version + 1);
        let written_by = written_by.map(str::to_string);
        list.push(ContextEntry { value, written_by: written_by.clone(), version });
        self.history.push(ContextWrite { key: key.to_string(), version, written_by });
        version
    }

    /// Places an initial value visible to every step.
    pub fn seed(&mut self, key: &str, value: Value) -> u64 {
        self.push(key, value, None)
    }

    pub fn write(&mut self, key: &str, value: Value, step: &str) -> u64 {
        self.push(key, value, Some(step))
    }

    pub fn latest(&self, key: &str) -> Option<&ContextEntry> {
        self.entries.get(key)?.last()
    }

    /// Newest value of `key` written before any step or by a step in `visible`.
    pub fn read(&self, key: &str, visible: &BTreeSet<String>) -> Option<&ContextEntry> {
        self.entries
            .get(key)?
            .iter()
            .rev()
            .find(|e| e.written_by.as_ref().is_none_or(|s| visible.contains(s)))
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn history(&self) -> &[ContextWrite] {
        &self.history
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn versions_and_visibility() {
        let mut c = Context::new("c1", "task-1");
        assert_eq!(c.seed("k", Value::Int(0)), 1);
        assert_eq!(c.write("k", Value::Int(1), "a"), 2);
        assert_eq!(c.write("k", Value::Int(2), "b"), 3);
        let only_a: BTreeSet<String> = ["a".to_string()].into();
        assert_eq!(c.read("k", &only_a).unwrap().value, Value::Int(1));
        assert_eq!(c.read("k", &BTreeSet::new()).unwrap().value, Value::Int(0));
        assert_eq!(c.latest("k").unwrap().version, 3);
        assert_eq!(c.history().len(), 3);
    }
}
