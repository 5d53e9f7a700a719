//! Connector implementations behind resources: `fixture` (records loaded
//! from a file or given inline), `kv_store` (in process) and `http_api`
//! (live mode only).

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::tool::{Action, ConnectorSpec, ToolError};
use crate::schema::FieldType;
use crate::value::{canonical_encode, from_canonical, from_value, Map, Value};

pub trait Connector: Send {
    fn execute(&mut self, action: &Action, args: &Map) -> Result<Value, ToolError>;
}

/// On-disk fixture: a schema header followed by records that satisfy it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureFile {
    pub schema: FieldType,
    pub records: Vec<Value>,
}

impl FixtureFile {
    pub fn check(&self) -> Result<(), String> {
        for (i, r) in self.records.iter().enumerate() {
            if let Some(v) = self.schema.check(r, &format!("records[{i}]")).first() {
                return Err(format!("{}: {}", v.path, v.detail));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        crate::value::to_canonical(self).expect("fixture encodes")
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let f: FixtureFile = from_canonical(&bytes).map_err(|e| format!("{}: {e}", path.display()))?;
        f.check()?;
        Ok(f)
    }
}

pub struct FixtureConnector {
    records: Vec<Map>,
}

impl FixtureConnector {
    pub fn new(file: FixtureFile) -> Result<Self, String> {
        file.check()?;
        let records = file
            .records
            .into_iter()
            .map(|r| match r {
                Value::Map(m) => Ok(m),
                other => Err(format!("fixture record is a {}", other.kind())),
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }

    fn matches(record: &Map, args: &Map) -> bool {
        args.iter().all(|(k, v)| record.get(k).is_none_or(|r| r == v))
    }
}

impl Connector for FixtureConnector {
    fn execute(&mut self, action: &Action, args: &Map) -> Result<Value, ToolError> {
        match action {
            Action::Query => {
                let hits: Vec<Value> =
                    self.records.iter().filter(|r| Self::matches(r, args)).cloned().map(Value::Map).collect();
                Ok(Value::Map(crate::map! { "records" => hits }))
            }
            Action::Lookup { key_field } => {
                let key = args.get(key_field).ok_or_else(|| ToolError::failure("bad_request", format!("missing {key_field}")))?;
                self.records
                    .iter()
                    .find(|r| r.get(key_field) == Some(key))
                    .map(|r| Value::Map(r.clone()))
                    .ok_or_else(|| ToolError::failure("not_found", format!("no record with {key_field} = {key}")))
            }
            other => Err(ToolError::failure("unsupported", format!("fixture cannot {other:?}"))),
        }
    }
}

/// In-process key/value store. Clones share contents so a harness can
/// inspect what tools wrote.
#[derive(Debug, Clone, Default)]
pub struct KvStore {
    inner: Arc<Mutex<BTreeMap<String, (u64, Map)>>>,
}

impl KvStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &str) -> Option<(u64, Map)> {
        self.inner.lock().expect("kv poisoned").get(key).cloned()
    }

    pub fn dump(&self) -> BTreeMap<String, (u64, Map)> {
        self.inner.lock().expect("kv poisoned").clone()
    }
}

fn key_of(args: &Map, field: &str) -> Result<String, ToolError> {
    match args.get(field) {
        Some(Value::Str(s)) => Ok(s.clone()),
        Some(other) => Ok(String::from_utf8(canonical_encode(other).expect("value encodes")).expect("canonical is utf-8")),
        None => Err(ToolError::failure("bad_request", format!("missing {field}"))),
    }
}

impl Connector for KvStore {
    fn execute(&mut self, action: &Action, args: &Map) -> Result<Value, ToolError> {
        let mut kv = self.inner.lock().expect("kv poisoned");
        match action {
            Action::Put { key_field } => {
                let key = key_of(args, key_field)?;
                let version = kv.get(&key).map_or(1, |(v, _)| v + 1);
                kv.insert(key.clone(), (version, args.clone()));
                Ok(Value::Map(crate::map! { "key" => key, "version" => version as i64 }))
            }
            Action::Get { key_field } => {
                let key = key_of(args, key_field)?;
                let (version, value) =
                    kv.get(&key).cloned().ok_or_else(|| ToolError::failure("not_found", format!("no value under {key}")))?;
                Ok(Value::Map(crate::map! { "key" => key, "version" => version as i64, "value" => value }))
            }
            other => Err(ToolError::failure("unsupported", format!("kv_store cannot {other:?}"))),
        }
    }
}

/// JSON over HTTP. Transport errors are reported as `unavailable`, HTTP
/// error statuses as `http_<status>`.
pub struct HttpApi {
    base_url: String,
    agent: ureq::Agent,
}

impl HttpApi {
    pub fn new(base_url: &str) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(std::time::Duration::from_secs(10)).build();
        Self { base_url: base_url.trim_end_matches('/').to_string(), agent }
    }
}

impl Connector for HttpApi {
    fn execute(&mut self, action: &Action, args: &Map) -> Result<Value, ToolError> {
        let Action::Request { method, path } = action else {
            return Err(ToolError::failure("unsupported", format!("http_api cannot {action:?}")));
        };
        let url = format!("{}{}", self.base_url, path);
        let body = Value::Map(args.clone()).to_json();
        let resp = match self.agent.request(method, &url).send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, _)) => return Err(ToolError::failure(&format!("http_{code}"), url)),
            Err(e) => return Err(ToolError::failure("unavailable", e.to_string())),
        };
        let json: serde_json::Value = resp.into_json().map_err(|e| ToolError::failure("bad_response", e.to_string()))?;
        Value::from_json(json).map_err(|e| ToolError::failure("bad_response", e.to_string()))
    }
}

/// Builds connectors by id. `http_api` is only available when `live` is set.
#[derive(Debug, Clone, Default)]
pub struct ConnectorFactory {
    live: bool,
    base_dir: Option<std::path::PathBuf>,
    stores: BTreeMap<String, KvStore>,
}

impl ConnectorFactory {
    pub fn sim() -> Self {
        Self::default()
    }

    pub fn live() -> Self {
        Self { live: true, ..Self::default() }
    }

    /// Directory that relative fixture paths are resolved against.
    pub fn with_base_dir(mut self, dir: impl Into<std::path::PathBuf>) -> Self {
        self.base_dir = Some(dir.into());
        self
    }

    /// Makes `kv_store` resources named `name` share `store`.
    pub fn with_store(mut self, name: &str, store: KvStore) -> Self {
        self.stores.insert(name.to_string(), store);
        self
    }

    pub fn build(&self, resource_id: &str, spec: &ConnectorSpec) -> Result<Box<dyn Connector>, ToolError> {
        let bad = |e: String| ToolError::failure("bad_config", format!("{resource_id}: {e}"));
        match spec.id.as_str() {
            "fixture" => {
                let file = if let Some(inline) = spec.config.get("inline") {
                    from_value::<FixtureFile>(inline).map_err(|e| bad(e.to_string()))?
                } else {
                    let rel = spec.config.get("path").and_then(Value::as_str).ok_or_else(|| bad("missing path".into()))?;
                    let path = match &self.base_dir {
                        Some(dir) => dir.join(rel),
                        None => rel.into(),
                    };
                    FixtureFile::load(&path).map_err(bad)?
                };
                Ok(Box::new(FixtureConnector::new(file).map_err(bad)?))
            }
            "kv_store" => Ok(Box::new(self.stores.get(resource_id).cloned().unwrap_or_default())),
            "http_api" if self.live => {
                let base = spec.config.get("base_url").and_then(Value::as_str).ok_or_else(|| bad("missing base_url".into()))?;
                Ok(Box::new(HttpApi::new(base)))
            }
            other => Err(ToolError::UnknownConnector(other.to_string())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map;
    use crate::schema::Field;

    fn fixture() -> FixtureFile {
        FixtureFile {
            schema: FieldType::record([("id", Field::required(FieldType::String)), ("cuisine", Field::required(FieldType::String))]),
            records: vec![
                Value::Map(map! { "id" => "r1", "cuisine" => "vegetarian" }),
                Value::Map(map! { "id" => "r2", "cuisine" => "thai" }),
                Value::Map(map! { "id" => "r3", "cuisine" => "vegetarian" }),
            ],
        }
    }

    #[test]
    fn fixture_query_and_lookup() {
        let mut c = FixtureConnector::new(fixture()).unwrap();
        let out = c.execute(&Action::Query, &map! { "cuisine" => "vegetarian" }).unwrap();
        let ids: Vec<_> = out.as_map().unwrap()["records"].as_list().unwrap().iter().map(|r| r.as_map().unwrap()["id"].clone()).collect();
        assert_eq!(ids, vec![Value::from("r1"), Value::from("r3")]);
        let one = c.execute(&Action::Lookup { key_field: "id".into() }, &map! { "id" => "r2" }).unwrap();
        assert_eq!(one.as_map().unwrap()["cuisine"], Value::from("thai"));
        let miss = c.execute(&Action::Lookup { key_field: "id".into() }, &map! { "id" => "zz" });
        assert_eq!(miss.unwrap_err().code(), "not_found");
    }

    #[test]
    fn fixture_file_round_trip_and_schema_header() {
        let f = fixture();
        let dir = std::env::temp_dir().join(format!("acp-fixture-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("r.json");
        std::fs::write(&path, f.to_bytes()).unwrap();
        assert_eq!(FixtureFile::load(&path).unwrap(), f);
        let mut broken = f.clone();
        broken.records.push(Value::Map(map! { "id" => 4 }));
        std::fs::write(&path, broken.to_bytes()).unwrap();
        assert!(FixtureFile::load(&path).is_err());
    }

    #[test]
    fn kv_versions_increase() {
        let store = KvStore::new();
        let mut c: Box<dyn Connector> = Box::new(store.clone());
        let put = Action::Put { key_field: "k".into() };
        assert_eq!(c.execute(&put, &map! { "k" => "a", "x" => 1 }).unwrap().as_map().unwrap()["version"], Value::Int(1));
        assert_eq!(c.execute(&put, &map! { "k" => "a", "x" => 2 }).unwrap().as_map().unwrap()["version"], Value::Int(2));
        assert_eq!(store.get("a").unwrap().1["x"], Value::Int(2));
        let got = c.execute(&Action::Get { key_field: "k".into() }, &map! { "k" => "a" }).unwrap();
        assert_eq!(got.as_map().unwrap()["version"], Value::Int(2));
    }

    #[test]
    fn http_api_needs_live_mode() {
        let spec = ConnectorSpec { id: "http_api".into(), config: map! { "base_url" => "http://127.0.0.1:9" } };
        assert!(matches!(ConnectorFactory::sim().build("r", &spec), Err(ToolError::UnknownConnector(_))));
        let mut c = ConnectorFactory::live().build("r", &spec).unwrap();
        let err = c.execute(&Action::Request { method: "POST".into(), path: "/x".into() }, &Map::new()).unwrap_err();
        assert_eq!(err.code(), "unavailable");
    }
}
