//! Scoring and ranking.
//!
//! `coverage = |required ∩ tags| / |required|`, `bonus = |optional ∩ tags| /
//! |optional|` (each 1.0 when its set is empty), `score = w_c·coverage +
//! w_b·bonus`. A descriptor over the query's cost or latency ceiling scores 0.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::catalog::Catalog;
use super::query::{MatchMode, Query};
use crate::descriptor::CapabilityDescriptor;
use crate::id::AgentId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub coverage: f64,
    pub bonus: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self { coverage: 0.7, bonus: 0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub agent: AgentId,
    pub score: f64,
    pub matched_required: BTreeSet<String>,
    pub matched_optional: BTreeSet<String>,
    pub descriptor_version: u64,
}

fn fraction(wanted: &BTreeSet<String>, have: &BTreeSet<String>) -> (f64, BTreeSet<String>) {
    let hit: BTreeSet<String> = wanted.intersection(have).cloned().collect();
    let f = if wanted.is_empty() { 1.0 } else { hit.len() as f64 / wanted.len() as f64 };
    (f, hit)
}

fn within_qos(q: &Query, d: &CapabilityDescriptor) -> bool {
    q.max_cost_tokens.is_none_or(|m| d.qos.cost_per_call_tokens <= m) && q.max_latency_ms.is_none_or(|m| d.qos.latency_ms_p50 <= m)
}

/// Scores one descriptor and returns the coverage alongside the result.
pub fn score_with(q: &Query, d: &CapabilityDescriptor, w: ScoreWeights) -> (MatchResult, f64) {
    let (coverage, matched_required) = fraction(&q.required_tags, &d.capability_tags);
    let (bonus, matched_optional) = fraction(&q.optional_tags, &d.capability_tags);
    let score = if within_qos(q, d) { w.coverage * coverage + w.bonus * bonus } else { 0.0 };
    let r = MatchResult {
        agent: d.agent.clone(),
        score,
        matched_required,
        matched_optional,
        descriptor_version: d.version,
    };
    (r, coverage)
}

pub fn match_score(q: &Query, d: &CapabilityDescriptor) -> f64 {
    score_with(q, d, ScoreWeights::default()).0.score
}

/// Ranking order: score descending, then agent id ascending as text.
pub fn rank_order(a: &MatchResult, b: &MatchResult) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.agent.to_string().cmp(&b.agent.to_string()))
}

pub fn discover(catalog: &Catalog, q: &Query) -> Vec<MatchResult> {
    discover_with(catalog, q, ScoreWeights::default())
}

pub fn discover_with(catalog: &Catalog, q: &Query, w: ScoreWeights) -> Vec<MatchResult> {
    let mut out: Vec<MatchResult> = catalog
        .entries()
        .filter(|e| !e.stale)
        .filter_map(|e| {
            let (r, coverage) = score_with(q, &e.descriptor, w);
            let keep = r.score > 0.0 && (q.mode == MatchMode::Loose || coverage == 1.0);
            keep.then_some(r)
        })
        .collect();
    out.sort_by(rank_order);
    out.truncate(q.limit);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(name: &str, tags: &[&str]) -> CapabilityDescriptor {
        CapabilityDescriptor::new(format!("acp://root/x/{name}").parse().unwrap(), tags)
    }

    #[test]
    fn spot_values() {
        assert_eq!(match_score(&Query::requiring(&["a"]), &d("p", &["a", "z"])), 1.0);
        let s = match_score(&Query::requiring(&["a", "b"]), &d("p", &["a"]));
        assert!((s - 0.65).abs() < 1e-12, "{s}");
        let mut q = Query::requiring(&["a"]);
        q.max_cost_tokens = Some(10);
        let mut expensive = d("p", &["a"]);
        expensive.qos.cost_per_call_tokens = 50;
        assert_eq!(match_score(&q, &expensive), 0.0);
    }

    #[test]
    fn optional_bonus() {
        let mut q = Query::requiring(&["a"]);
        q.optional_tags = ["b".to_string(), "c".to_string()].into();
        let s = match_score(&q, &d("p", &["a", "b"]));
        assert!((s - (0.7 + 0.15)).abs() < 1e-12);
    }
}
