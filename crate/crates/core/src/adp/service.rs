//! Discovery server actor. Pulls a snapshot from every trusted registry on
//! start, follows their capability events and answers `discover_request`.

use std::collections::BTreeSet;

use super::catalog::{AdpError, Catalog};
use super::matching::{discover_with, MatchResult, ScoreWeights};
use super::query::{parse_query, MatchMode, Query, QueryError, QueryInput, SynonymTable};
use crate::a3ap::handshake::{HandshakeEvent, Handshakes};
use crate::a3ap::sign::Identity;
use crate::a3ap::TrustRoots;
use crate::envelope::{Envelope, Protocol};
use crate::id::{Principal, ServiceId};
use crate::map;
use crate::transport::{Actor, ActorCtx};
use crate::value::{from_value, to_value, Map, Value};

/// Well-known principal of the discovery service.
pub fn discovery_principal() -> Principal {
    Principal::Service(ServiceId::new(&["discovery"]).expect("valid service id"))
}

/// Request payload for either query form.
pub fn discover_payload(input: &QueryInput) -> Map {
    match input {
        QueryInput::Text(t) => map! { "text" => t.as_str() },
        QueryInput::Structured(q) => map! { "query" => to_value(q).expect("query encodes") },
    }
}

/// Reads a `discover_request` payload back into a query input. A text query
/// may carry `mode` and `limit` alongside.
pub fn read_discover_payload(payload: &Map, synonyms: &SynonymTable) -> Result<Query, QueryError> {
    if let Some(q) = payload.get("query") {
        let q: Query = from_value(q).map_err(|_| QueryError::EmptyQuery)?;
        return parse_query(QueryInput::Structured(q), synonyms);
    }
    let text = payload.get("text").and_then(Value::as_str).unwrap_or_default();
    let mut q = parse_query(QueryInput::Text(text.to_string()), synonyms)?;
    if let Some(mode) = payload.get("mode").and_then(|m| from_value::<MatchMode>(m).ok()) {
        q.mode = mode;
    }
    if let Some(limit) = payload.get("limit").and_then(Value::as_int) {
        q.limit = usize::try_from(limit).map_err(|_| QueryError::ZeroLimit)?;
        if q.limit == 0 {
            return Err(QueryError::ZeroLimit);
        }
    }
    Ok(q)
}

/// Reads the ranked list out of a `discover_result`.
pub fn read_discover_result(env: &Envelope) -> Result<Vec<MatchResult>, String> {
    if env.get("ok").and_then(Value::as_bool) != Some(true) {
        let detail = env.get("error").map(|e| e.to_string()).unwrap_or_else(|| "discovery failed".into());
        return Err(detail);
    }
    let results = env.get("results").ok_or("missing results")?;
    from_value(results).map_err(|e| e.to_string())
}

pub struct DiscoveryService {
    identity: Identity,
    catalog: Catalog,
    sources: Vec<Principal>,
    synced: BTreeSet<Principal>,
    synonyms: SynonymTable,
    weights: ScoreWeights,
    handshakes: Handshakes,
}

impl DiscoveryService {
    pub fn new(identity: Identity, catalog: Catalog, synonyms: SynonymTable, roots: TrustRoots, handshake_timeout: u64) -> Self {
        let sources = catalog.registries().cloned().map(Principal::Service).collect();
        Self {
            identity,
            catalog,
            sources,
            synced: BTreeSet::new(),
            synonyms,
            weights: ScoreWeights::default(),
            handshakes: Handshakes::new(roots, handshake_timeout),
        }
    }

    pub fn with_weights(mut self, weights: ScoreWeights) -> Self {
        self.weights = weights;
        self
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    /// True once every trusted registry has delivered its snapshot.
    pub fn synced(&self) -> bool {
        self.sources.iter().all(|s| self.synced.contains(s))
    }

    fn answer(&self, ctx: &mut ActorCtx, env: &Envelope) {
        let payload = match read_discover_payload(&env.payload, &self.synonyms) {
            Ok(q) => {
                let results = discover_with(&self.catalog, &q, self.weights);
                ctx.info(format!("discover {:?} -> {} result(s)", q.required_tags, results.len()));
                map! {
                    "ok" => true,
                    "query" => to_value(&q).expect("query encodes"),
                    "results" => to_value(&results).expect("results encode"),
                }
            }
            Err(e) => map! {
                "ok" => false,
                "error" => map! { "code" => query_code(&e), "detail" => e.to_string() },
            },
        };
        self.identity.reply(ctx, env, "discover_result", payload);
    }

    fn ingest(&mut self, ctx: &mut ActorCtx, env: &Envelope) {
        let r: Result<(), AdpError> = match env.msg_type.as_str() {
            "capability_event" => self.catalog.ingest_event(env).map(|_| ()),
            _ => self.catalog.ingest_snapshot(env).map(|_| {
                self.synced.insert(env.sender.clone());
            }),
        };
        if let Err(e) = r {
            ctx.info(format!("{} from {} dropped: {e}", env.msg_type, env.sender));
        }
    }
}

fn query_code(e: &QueryError) -> &'static str {
    match e {
        QueryError::EmptyQuery => "empty_query",
        QueryError::ZeroLimit => "bad_limit",
        QueryError::BadTag(_) => "bad_tag",
    }
}

impl Actor for DiscoveryService {
    fn principal(&self) -> Principal {
        self.identity.principal.clone()
    }

    fn on_start(&mut self, ctx: &mut ActorCtx) {
        for src in &self.sources {
            self.identity.request(ctx, Protocol::Adp, "sync_request", src, Map::new());
        }
    }

    fn on_message(&mut self, env: Envelope, ctx: &mut ActorCtx) {
        match (env.protocol, env.msg_type.as_str()) {
            (Protocol::A3ap, _) => {
                if let Some(HandshakeEvent::Failed { peer, error }) = self.handshakes.handle(&self.identity, &env, ctx) {
                    ctx.info(format!("handshake with {peer} failed: {error}"));
                }
            }
            (Protocol::Adp, "discover_request") => self.answer(ctx, &env),
            (Protocol::Adp | Protocol::Arp, "capability_event") | (Protocol::Adp, "sync_snapshot") => self.ingest(ctx, &env),
            _ => ctx.info(format!("ignored {} {}", env.protocol, env.msg_type)),
        }
    }

    fn on_tick(&mut self, ctx: &mut ActorCtx) {
        for ev in self.handshakes.poll_timeouts(ctx.now()) {
            if let HandshakeEvent::Failed { peer, error } = ev {
                ctx.info(format!("handshake with {peer} failed: {error}"));
            }
        }
    }
}
