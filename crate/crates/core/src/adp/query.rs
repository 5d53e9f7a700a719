//! Discovery queries: structured input or free text mapped through a
//! synonym table onto capability tags.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::is_valid_tag;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Only agents covering every required tag.
    #[default]
    Strict,
    /// Any agent with a positive score.
    Loose,
}

fn default_limit() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    #[serde(default)]
    pub required_tags: BTreeSet<String>,
    #[serde(default)]
    pub optional_tags: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_cost_tokens: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_latency_ms: Option<i64>,
    #[serde(default = "default_limit")]
    pub limit: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
    #[serde(default)]
    pub mode: MatchMode,
}

impl Default for Query {
    fn default() -> Self {
        Self {
            required_tags: BTreeSet::new(),
            optional_tags: BTreeSet::new(),
            max_cost_tokens: None,
            max_latency_ms: None,
            limit: default_limit(),
            raw_text: None,
            mode: MatchMode::Strict,
        }
    }
}

impl Query {
    pub fn requiring(tags: &[&str]) -> Self {
        Self { required_tags: tags.iter().map(|t| t.to_string()).collect(), ..Self::default() }
    }

    pub fn loose(mut self) -> Self {
        self.mode = MatchMode::Loose;
        self
    }

    pub fn with_limit(mut self, limit: usize) -> Self {
        self.limit = limit;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueryError {
    #[error("no capability tag could be derived from the query")]
    EmptyQuery,
    #[error("limit must be at least 1")]
    ZeroLimit,
    #[error("{0:?} is not a valid tag")]
    BadTag(String),
}

/// Either form a caller may submit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueryInput {
    Text(String),
    Structured(Query),
}

/// Maps words and two-word phrases to capability tags.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SynonymTable(pub BTreeMap<String, Vec<String>>);

impl SynonymTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, term: &str, tags: &[&str]) -> Self {
        self.0.entry(term.to_string()).or_default().extend(tags.iter().map(|t| t.to_string()));
        self
    }

    pub fn lookup(&self, term: &str) -> &[String] {
        self.0.get(term).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Lowercases and splits on anything that is not an ASCII letter or digit.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Turns input into a validated query. Text maps every token and bigram
/// found in `synonyms` to required tags; unmapped words are dropped.
pub fn parse_query(input: QueryInput, synonyms: &SynonymTable) -> Result<Query, QueryError> {
    let q = match input {
        QueryInput::Structured(q) => q,
        QueryInput::Text(text) => {
            let tokens = tokenize(&text);
            let mut tags = BTreeSet::new();
            for t in &tokens {
                tags.extend(synonyms.lookup(t).iter().cloned());
            }
            for pair in tokens.windows(2) {
                tags.extend(synonyms.lookup(&format!("{} {}", pair[0], pair[1])).iter().cloned());
            }
            Query { required_tags: tags, raw_text: Some(text), ..Query::default() }
        }
    };
    if q.required_tags.is_empty() && q.optional_tags.is_empty() {
        return Err(QueryError::EmptyQuery);
    }
    if q.limit == 0 {
        return Err(QueryError::ZeroLimit);
    }
    if let Some(bad) = q.required_tags.iter().chain(&q.optional_tags).find(|t| !is_valid_tag(t)) {
        return Err(QueryError::BadTag(bad.clone()));
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn structured_passes_through() {
        let q = Query::requiring(&["restaurant.booking"]);
        assert_eq!(parse_query(QueryInput::Structured(q.clone()), &SynonymTable::new()), Ok(q));
    }

    #[test]
    fn text_maps_tokens() {
        let table = SynonymTable::new().with("book", &["restaurant.booking"]).with("restaurant", &["restaurant.search"]);
        let q = parse_query(QueryInput::Text("Book a restaurant near me!".into()), &table).unwrap();
        let want: BTreeSet<String> = ["restaurant.booking", "restaurant.search"].iter().map(|s| s.to_string()).collect();
        assert_eq!(q.required_tags, want);
        assert_eq!(q.raw_text.as_deref(), Some("Book a restaurant near me!"));
    }

    #[test]
    fn bigrams_map_too() {
        let table = SynonymTable::new().with("travel plan", &["travel.planning"]);
        let q = parse_query(QueryInput::Text("a travel-plan please".into()), &table).unwrap();
        assert!(q.required_tags.contains("travel.planning"));
    }

    #[test]
    fn empty_and_invalid() {
        let t = SynonymTable::new();
        assert_eq!(parse_query(QueryInput::Text("xyzzy".into()), &t), Err(QueryError::EmptyQuery));
        assert_eq!(parse_query(QueryInput::Structured(Query::requiring(&["a"]).with_limit(0)), &t), Err(QueryError::ZeroLimit));
        assert_eq!(
            parse_query(QueryInput::Structured(Query::requiring(&["Bad Tag"])), &t),
            Err(QueryError::BadTag("Bad Tag".into()))
        );
    }

    #[test]
    fn limit_defaults_to_ten_when_absent() {
        let q: Query = crate::value::from_canonical(br#"{"required_tags":["a"]}"#).unwrap();
        assert_eq!(q.limit, 10);
        assert_eq!(q.mode, MatchMode::Strict);
    }
}
