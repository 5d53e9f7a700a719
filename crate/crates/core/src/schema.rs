//! Named-field type trees for operation inputs and outputs, and the
//! violation report shared by every validator in the crate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::value::Value;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub rule: String,
    pub detail: String,
}

impl Violation {
    pub fn new(path: impl Into<String>, rule: &str, detail: impl Into<String>) -> Self {
        Self { path: path.into(), rule: rule.to_string(), detail: detail.into() }
    }
}

/// Outcome of a validation pass. `ok` is true exactly when `violations` is empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn from_violations(violations: Vec<Violation>) -> Self {
        Self { ok: violations.is_empty(), violations }
    }

    pub fn has_path(&self, path: &str) -> bool {
        self.violations.iter().any(|v| v.path == path)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum FieldType {
    String,
    Int,
    Float,
    Bool,
    List {
        items: Box<FieldType>,
    },
    /// A record with named fields. Closed unless `open` is set, in which case
    /// keys not listed in `fields` are accepted without checks.
    Map {
        #[serde(default)]
        fields: BTreeMap<String, Field>,
        #[serde(default, skip_serializing_if = "is_false")]
        open: bool,
    },
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Field {
    #[serde(flatten)]
    pub ty: FieldType,
    #[serde(default, skip_serializing_if = "is_false")]
    pub optional: bool,
}

impl Field {
    pub fn required(ty: FieldType) -> Self {
        Self { ty, optional: false }
    }

    pub fn optional(ty: FieldType) -> Self {
        Self { ty, optional: true }
    }
}

impl FieldType {
    pub fn record<I, K>(fields: I) -> FieldType
    where
        I: IntoIterator<Item = (K, Field)>,
        K: Into<String>,
    {
        FieldType::Map { fields: fields.into_iter().map(|(k, f)| (k.into(), f)).collect(), open: false }
    }

    pub fn list_of(items: FieldType) -> FieldType {
        FieldType::List { items: Box::new(items) }
    }

    pub fn open_map() -> FieldType {
        FieldType::Map { fields: BTreeMap::new(), open: true }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FieldType::String => "string",
            FieldType::Int => "int",
            FieldType::Float => "float",
            FieldType::Bool => "bool",
            FieldType::List { .. } => "list",
            FieldType::Map { .. } => "map",
        }
    }

    /// Looks up the type of a top-level field of a record type.
    pub fn field(&self, name: &str) -> Option<&Field> {
        match self {
            FieldType::Map { fields, .. } => fields.get(name),
            _ => None,
        }
    }

    /// Checks `value` against this type and returns every mismatch found.
    pub fn check(&self, value: &Value, path: &str) -> Vec<Violation> {
        let mut out = Vec::new();
        check_into(self, value, path, &mut out);
        out
    }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

fn check_into(ty: &FieldType, value: &Value, path: &str, out: &mut Vec<Violation>) {
    let shown = if path.is_empty() { "$" } else { path };
    match (ty, value) {
        (FieldType::String, Value::Str(_))
        | (FieldType::Int, Value::Int(_))
        | (FieldType::Float, Value::Float(_))
        | (FieldType::Bool, Value::Bool(_)) => {}
        (FieldType::List { items }, Value::List(values)) => {
            for (i, v) in values.iter().enumerate() {
                check_into(items, v, &format!("{path}[{i}]"), out);
            }
        }
        (FieldType::Map { fields, open }, Value::Map(m)) => {
            for (name, field) in fields {
                match m.get(name) {
                    Some(v) => check_into(&field.ty, v, &join(path, name), out),
                    None if field.optional => {}
                    None => out.push(Violation::new(join(path, name), "required", "field missing")),
                }
            }
            if !open {
                for key in m.keys().filter(|k| !fields.contains_key(*k)) {
                    out.push(Violation::new(join(path, key), "unknown_field", "not declared in schema"));
                }
            }
        }
        (expected, got) => out.push(Violation::new(
            shown,
            "type",
            format!("expected {}, found {}", expected.name(), got.kind()),
        )),
    }
}

/// Signature of one operation exposed by an agent or tool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationSig {
    pub name: String,
    pub input: FieldType,
    pub output: FieldType,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::map;

    fn search_input() -> FieldType {
        FieldType::record([
            ("cuisine", Field::required(FieldType::String)),
            ("diet", Field::optional(FieldType::list_of(FieldType::String))),
        ])
    }

    #[test]
    fn missing_required_field_reports_its_path() {
        let v = Value::Map(map! { "diet" => vec![Value::from("vegan")] });
        let errs = search_input().check(&v, "");
        assert_eq!(errs, vec![Violation::new("cuisine", "required", "field missing")]);
    }

    #[test]
    fn nested_type_errors_carry_index() {
        let v = Value::Map(map! { "cuisine" => "thai", "diet" => vec![Value::from("a"), Value::Int(3)] });
        let errs = search_input().check(&v, "args");
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].path, "args.diet[1]");
        assert_eq!(errs[0].rule, "type");
    }

    #[test]
    fn closed_maps_reject_unknown_keys() {
        let v = Value::Map(map! { "cuisine" => "thai", "extra" => 1i64 });
        assert_eq!(search_input().check(&v, "")[0].rule, "unknown_field");
        assert!(FieldType::open_map().check(&v, "").is_empty());
    }

    #[test]
    fn schema_serde_shape() {
        let json = serde_json::to_string(&search_input()).unwrap();
        assert_eq!(
            json,
            r#"{"type":"map","fields":{"cuisine":{"type":"string"},"diet":{"type":"list","items":{"type":"string"},"optional":true}}}"#
        );
        let back: FieldType = serde_json::from_str(&json).unwrap();
        assert_eq!(back, search_input());
    }
}
