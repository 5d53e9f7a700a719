//! Schema-typed values and their canonical byte encoding.
//!
//! The canonical form is a strict subset of JSON: map keys in ascending byte
//! order, no insignificant whitespace, floats in shortest round-trip form and
//! no `null`. Equal values always encode to identical bytes, which is what
//! makes detached signatures over them stable.

use std::collections::BTreeMap;
use std::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// String-keyed map. `BTreeMap<String, _>` iterates in byte order.
pub type Map = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    List(Vec<Value>),
    Map(Map),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("unsupported node at {path}: {detail}")]
    UnsupportedNode { path: String, detail: String },
    #[error("map key is not a string")]
    NonStringKey,
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("malformed input: {0}")]
    Syntax(String),
    #[error(transparent)]
    Node(#[from] EncodeError),
    #[error("input is not in canonical form")]
    NotCanonical,
    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl Value {
    pub fn kind(&self) -> &'static str {
        match self {
            Value::Bool(_) => "bool",
            Value::Int(_) => "int",
            Value::Float(_) => "float",
            Value::Str(_) => "string",
            Value::List(_) => "list",
            Value::Map(_) => "map",
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Value::Bool(b) => Some(*b),
            _ => None,
        }
    }

    pub fn as_map(&self) -> Option<&Map> {
        match self {
            Value::Map(m) => Some(m),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        match self {
            Value::List(l) => Some(l),
            _ => None,
        }
    }

    /// Converts from a parsed JSON tree, rejecting `null` and out-of-range numbers.
    pub fn from_json(json: serde_json::Value) -> Result<Value, EncodeError> {
        from_json_at(json, &mut String::from("$"))
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Value::Bool(b) => serde_json::Value::Bool(*b),
            Value::Int(i) => serde_json::Value::from(*i),
            Value::Float(f) => serde_json::Number::from_f64(*f)
                .map(serde_json::Value::Number)
                .unwrap_or(serde_json::Value::Null),
            Value::Str(s) => serde_json::Value::String(s.clone()),
            Value::List(items) => serde_json::Value::Array(items.iter().map(Value::to_json).collect()),
            Value::Map(m) => serde_json::Value::Object(
                m.iter().map(|(k, v)| (k.clone(), v.to_json())).collect(),
            ),
        }
    }
}

fn from_json_at(json: serde_json::Value, path: &mut String) -> Result<Value, EncodeError> {
    Ok(match json {
        serde_json::Value::Null => {
            return Err(EncodeError::UnsupportedNode { path: path.clone(), detail: "null".into() })
        }
        serde_json::Value::Bool(b) => Value::Bool(b),
        serde_json::Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                Value::Int(i)
            } else if n.is_u64() {
                return Err(EncodeError::UnsupportedNode {
                    path: path.clone(),
                    detail: format!("integer {n} exceeds i64"),
                });
            } else {
                Value::Float(n.as_f64().unwrap_or(f64::NAN))
            }
        }
        serde_json::Value::String(s) => Value::Str(s),
        serde_json::Value::Array(items) => {
            let mut out = Vec::with_capacity(items.len());
            for (i, item) in items.into_iter().enumerate() {
                let len = path.len();
                path.push_str(&format!("[{i}]"));
                out.push(from_json_at(item, path)?);
                path.truncate(len);
            }
            Value::List(out)
        }
        serde_json::Value::Object(obj) => {
            let mut out = Map::new();
            for (k, v) in obj {
                let len = path.len();
                path.push('.');
                path.push_str(&k);
                let v = from_json_at(v, path)?;
                path.truncate(len);
                out.insert(k, v);
            }
            Value::Map(out)
        }
    })
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}
impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Int(v)
    }
}
impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Float(v)
    }
}
impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Str(v.to_string())
    }
}
impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Str(v)
    }
}
impl From<Map> for Value {
    fn from(v: Map) -> Self {
        Value::Map(v)
    }
}
impl From<Vec<Value>> for Value {
    fn from(v: Vec<Value>) -> Self {
        Value::List(v)
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Value::Bool(b) => s.serialize_bool(*b),
            Value::Int(i) => s.serialize_i64(*i),
            Value::Float(f) => s.serialize_f64(*f),
            Value::Str(v) => s.serialize_str(v),
            Value::List(items) => items.serialize(s),
            Value::Map(m) => m.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let json = serde_json::Value::deserialize(d)?;
        Value::from_json(json).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match canonical_encode(self) {
            Ok(bytes) => f.write_str(&String::from_utf8_lossy(&bytes)),
            Err(_) => write!(f, "<{}>", self.kind()),
        }
    }
}

/// Encodes a value in canonical form.
pub fn canonical_encode(value: &Value) -> Result<Vec<u8>, EncodeError> {
    let mut out = Vec::new();
    write_value(value, &mut out, &mut String::from("$"))?;
    Ok(out)
}

fn write_value(value: &Value, out: &mut Vec<u8>, path: &mut String) -> Result<(), EncodeError> {
    match value {
        Value::Bool(true) => out.extend_from_slice(b"true"),
        Value::Bool(false) => out.extend_from_slice(b"false"),
        Value::Int(i) => out.extend_from_slice(i.to_string().as_bytes()),
        Value::Float(f) => {
            if !f.is_finite() {
                return Err(EncodeError::UnsupportedNode {
                    path: path.clone(),
                    detail: format!("non-finite float {f}"),
                });
            }
            // serde_json renders f64 via ryu: shortest round-trip, always with
            // a fraction or exponent so it never reads back as an integer.
            serde_json::to_writer(&mut *out, f).expect("writing to a Vec cannot fail");
        }
        Value::Str(s) => serde_json::to_writer(&mut *out, s).expect("writing to a Vec cannot fail"),
        Value::List(items) => {
            out.push(b'[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                let len = path.len();
                path.push_str(&format!("[{i}]"));
                write_value(item, out, path)?;
                path.truncate(len);
            }
            out.push(b']');
        }
        Value::Map(m) => {
            out.push(b'{');
            for (i, (k, v)) in m.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                serde_json::to_writer(&mut *out, k).expect("writing to a Vec cannot fail");
                out.push(b':');
                let len = path.len();
                path.push('.');
                path.push_str(k);
                write_value(v, out, path)?;
                path.truncate(len);
            }
            out.push(b'}');
        }
    }
    Ok(())
}

/// Parses bytes into a value. Accepts any JSON without `null`; use
/// [`parse_canonical_strict`] to also require canonical form.
pub fn parse_canonical(bytes: &[u8]) -> Result<Value, DecodeError> {
    let json: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| DecodeError::Syntax(e.to_string()))?;
    Ok(Value::from_json(json)?)
}

/// Parses bytes and rejects them unless re-encoding yields the identical bytes.
pub fn parse_canonical_strict(bytes: &[u8]) -> Result<Value, DecodeError> {
    let value = parse_canonical(bytes)?;
    if canonical_encode(&value)? != bytes {
        return Err(DecodeError::NotCanonical);
    }
    Ok(value)
}

/// Converts any serializable type into a [`Value`].
pub fn to_value<T: Serialize + ?Sized>(v: &T) -> Result<Value, EncodeError> {
    let json = serde_json::to_value(v).map_err(|e| {
        if e.to_string().contains("key must be a string") {
            EncodeError::NonStringKey
        } else {
            EncodeError::UnsupportedNode { path: "$".into(), detail: e.to_string() }
        }
    })?;
    Value::from_json(json)
}

pub fn from_value<T: DeserializeOwned>(v: &Value) -> Result<T, DecodeError> {
    serde_json::from_value(v.to_json()).map_err(|e| DecodeError::Shape(e.to_string()))
}

/// Canonical bytes of any serializable type.
pub fn to_canonical<T: Serialize + ?Sized>(v: &T) -> Result<Vec<u8>, EncodeError> {
    canonical_encode(&to_value(v)?)
}

pub fn from_canonical<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, DecodeError> {
    from_value(&parse_canonical(bytes)?)
}

/// Builds a [`Map`] from `key => value` pairs.
#[macro_export]
macro_rules! map {
    () => { $crate::value::Map::new() };
    ($($k:expr => $v:expr),+ $(,)?) => {{
        let mut m = $crate::value::Map::new();
        $( m.insert(($k).to_string(), $crate::value::Value::from($v)); )+
        m
    }};
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    #[test]
    fn empty_map_is_two_bytes() {
        assert_eq!(canonical_encode(&Value::Map(Map::new())).unwrap(), b"{}");
    }

    #[test]
    fn keys_are_sorted() {
        let v = parse_canonical(br#"{"b":1,"a":2}"#).unwrap();
        assert_eq!(canonical_encode(&v).unwrap(), br#"{"a":2,"b":1}"#);
    }

    #[test]
    fn golden_bytes() {
        let v = Value::Map(map! {
            "z" => vec![Value::Float(0.1), Value::Float(1.0), Value::Int(-3)],
            "A" => "é\"\n",
            "m" => map! { "t" => true, "f" => false },
            "big" => Value::Float(1e300),
        });
        assert_eq!(
            String::from_utf8(canonical_encode(&v).unwrap()).unwrap(),
            r#"{"A":"é\"\n","big":1e+300,"m":{"f":false,"t":true},"z":[0.1,1.0,-3]}"#
        );
    }

    #[test]
    fn null_and_nan_are_unsupported() {
        assert!(matches!(
            parse_canonical(br#"{"a":[1,null]}"#),
            Err(DecodeError::Node(EncodeError::UnsupportedNode { ref path, .. })) if path == "$.a[1]"
        ));
        assert!(matches!(
            canonical_encode(&Value::Float(f64::NAN)),
            Err(EncodeError::UnsupportedNode { .. })
        ));
    }

    #[test]
    fn non_string_keys_are_rejected() {
        let mut m: HashMap<(u8, u8), i64> = HashMap::new();
        m.insert((1, 2), 3);
        assert_eq!(to_value(&m), Err(EncodeError::NonStringKey));
    }

    #[test]
    fn strict_parse_rejects_whitespace() {
        assert!(parse_canonical_strict(br#"{"a":1}"#).is_ok());
        assert!(matches!(parse_canonical_strict(br#"{ "a":1}"#), Err(DecodeError::NotCanonical)));
    }

    fn arb_value() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            any::<bool>().prop_map(Value::Bool),
            any::<i64>().prop_map(Value::Int),
            any::<f64>().prop_filter("finite", |f| f.is_finite()).prop_map(Value::Float),
            ".{0,8}".prop_map(Value::Str),
        ];
        leaf.prop_recursive(4, 48, 6, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 0..6).prop_map(Value::List),
                prop::collection::btree_map(".{0,6}", inner, 0..6).prop_map(Value::Map),
            ]
        })
    }

    proptest! {
        #[test]
        fn encode_parse_round_trip(v in arb_value()) {
            let bytes = canonical_encode(&v).unwrap();
            let back = parse_canonical_strict(&bytes).unwrap();
            prop_assert_eq!(canonical_encode(&back).unwrap(), bytes);
        }
    }
}
