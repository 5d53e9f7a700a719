//! Agent discovery: a catalog fed by registry events, query parsing and
//! ranked capability matching.

pub mod catalog;
pub mod matching;
pub mod query;
pub mod service;

pub use catalog::{AdpError, Applied, Catalog, CatalogEntry};
pub use matching::{discover, discover_with, match_score, rank_order, score_with, MatchResult, ScoreWeights};
pub use query::{parse_query, tokenize, MatchMode, Query, QueryError, QueryInput, SynonymTable};
pub use service::{discover_payload, discovery_principal, read_discover_payload, read_discover_result, DiscoveryService};

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use proptest::prelude::*;

    use super::*;
    use crate::arp::{send_register, CapabilityChange, RegistryNode, RegistryService};
    use crate::descriptor::CapabilityDescriptor;
    use crate::envelope::{Envelope, Protocol};
    use crate::id::{Principal, ServiceId};
    use crate::testkit::Org;
    use crate::transport::{Actor, ActorCtx, SimNetwork};

    const TAGS: [&str; 6] = ["t.a", "t.b", "t.c", "t.d", "t.e", "t.f"];

    fn pick(mask: u8) -> BTreeSet<String> {
        TAGS.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, t)| t.to_string()).collect()
    }

    fn catalog_of(entries: &[(u8, i64)]) -> Catalog {
        let svc = ServiceId::new(&["registry", "root", "x"]).unwrap();
        let mut cat = Catalog::new();
        for (i, (mask, cost)) in entries.iter().enumerate() {
            let mut d = CapabilityDescriptor::new(format!("acp://root/x/agent-{i:03}").parse().unwrap(), &[]);
            d.capability_tags = pick(*mask);
            d.qos.cost_per_call_tokens = *cost;
            cat.apply(&svc, CapabilityChange::Upsert { descriptor: d }).unwrap();
        }
        cat
    }

    /// Straight-line reimplementation used as the reference.
    fn oracle(cat: &Catalog, q: &Query) -> Vec<(String, f64)> {
        let mut all = Vec::new();
        for e in cat.entries() {
            let d = &e.descriptor;
            if q.max_cost_tokens.is_some_and(|m| d.qos.cost_per_call_tokens > m) {
                continue;
            }
            let req_hit = q.required_tags.iter().filter(|t| d.capability_tags.contains(*t)).count();
            let opt_hit = q.optional_tags.iter().filter(|t| d.capability_tags.contains(*t)).count();
            if q.mode == MatchMode::Strict && req_hit != q.required_tags.len() {
                continue;
            }
            let cov = if q.required_tags.is_empty() { 1.0 } else { req_hit as f64 / q.required_tags.len() as f64 };
            let bon = if q.optional_tags.is_empty() { 1.0 } else { opt_hit as f64 / q.optional_tags.len() as f64 };
            let s = 0.7 * cov + 0.3 * bon;
            if s > 0.0 {
                all.push((e.agent.to_string(), s));
            }
        }
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(q.limit);
        all
    }

    fn arb_query() -> impl Strategy<Value = Query> {
        (1u8..64, 0u8..64, prop::option::of(0i64..100), 1usize..15, any::<bool>()).prop_map(|(req, opt, cost, limit, loose)| {
            Query {
                required_tags: pick(req),
                optional_tags: pick(opt),
                max_cost_tokens: cost,
                limit,
                mode: if loose { MatchMode::Loose } else { MatchMode::Strict },
                ..Query::default()
            }
        })
    }

    proptest! {
        #[test]
        fn discover_agrees_with_oracle(
            entries in prop::collection::vec((0u8..64, 0i64..100), 0..=100),
            queries in prop::collection::vec(arb_query(), 1..10),
        ) {
            let cat = catalog_of(&entries);
            for q in &queries {
                let got: Vec<(String, f64)> = discover(&cat, q).into_iter().map(|r| (r.agent.to_string(), r.score)).collect();
                prop_assert_eq!(got, oracle(&cat, q));
            }
        }

        #[test]
        fn score_bounds(mask in 0u8..64, q in arb_query()) {
            let mut d = CapabilityDescriptor::new("acp://root/x/a".parse().unwrap(), &[]);
            d.capability_tags = pick(mask);
            let s = match_score(&q, &d);
            prop_assert!((0.0..=1.0).contains(&s));
            let full = q.required_tags.is_subset(&d.capability_tags) && q.optional_tags.is_subset(&d.capability_tags);
            prop_assert_eq!(s == 1.0, full);
        }
    }

    #[test]
    fn text_query_end_to_end() {
        let table = SynonymTable::new().with("book", &["restaurant.booking"]).with("restaurant", &["restaurant.search"]);
        let q = parse_query(QueryInput::Text("book a restaurant near me".into()), &table).unwrap();
        let svc = ServiceId::new(&["registry", "root", "food"]).unwrap();
        let mut cat = Catalog::new();
        for (name, tags) in [("both", &["restaurant.booking", "restaurant.search"][..]), ("one", &["restaurant.search"][..])] {
            let d = CapabilityDescriptor::new(format!("acp://root/food/{name}").parse().unwrap(), tags);
            cat.apply(&svc, CapabilityChange::Upsert { descriptor: d }).unwrap();
        }
        let strict = discover(&cat, &q);
        assert_eq!(strict.len(), 1);
        assert_eq!(strict[0].agent.agent_name(), "both");
        let loose = discover(&cat, &q.clone().loose());
        assert_eq!(loose.len(), 2);
        assert!((loose[1].score - 0.65).abs() < 1e-12);
    }

    struct Client {
        id: crate::a3ap::Identity,
        desc: Option<CapabilityDescriptor>,
        inbox: Vec<Envelope>,
    }

    impl Actor for Client {
        fn principal(&self) -> Principal {
            self.id.principal.clone()
        }
        fn on_start(&mut self, ctx: &mut ActorCtx) {
            if let Some(d) = &self.desc {
                send_register(&self.id, d, ctx);
            }
        }
        fn on_message(&mut self, env: Envelope, _: &mut ActorCtx) {
            self.inbox.push(env);
        }
    }

    #[test]
    fn service_follows_registry_events() {
        let mut org = Org::new(5, &["root", "root/food"]);
        let mut net = SimNetwork::new(5).with_keyring(org.keyring().clone());
        let reg = org.registry("root/food");
        let svc = match &reg.principal {
            Principal::Service(s) => s.clone(),
            _ => unreachable!(),
        };
        let mut cat = Catalog::new();
        cat.trust(svc, reg.public_key());
        net.add(RegistryService::new(reg, RegistryNode::new("root/food".parse().unwrap(), org.roots().clone()), 50)).unwrap();
        let disc = org.service("svc://discovery", "root");
        net.add(DiscoveryService::new(disc, cat, SynonymTable::new(), org.roots().clone(), 50)).unwrap();
        net.run_to_quiescence(10);
        assert!(net.actor::<DiscoveryService>(&discovery_principal()).unwrap().synced());

        let booking = org.agent("root/food", "booking");
        let d = CapabilityDescriptor::new(booking.principal.as_agent().unwrap().clone(), &["restaurant.booking"]);
        net.add(Client { id: booking.clone(), desc: Some(d), inbox: vec![] }).unwrap();
        net.run_to_quiescence(10);
        assert_eq!(net.actor::<DiscoveryService>(&discovery_principal()).unwrap().catalog().len(), 1);

        let user = org.agent("root/food", "asker");
        let ask = org.envelope(
            &user,
            Protocol::Adp,
            "discover_request",
            &discovery_principal(),
            None,
            discover_payload(&QueryInput::Structured(Query::requiring(&["restaurant.booking"]).with_limit(5))),
        );
        net.add(Client { id: user.clone(), desc: None, inbox: vec![] }).unwrap();
        net.with_actor(&user.principal, |_, ctx| ctx.send(ask));
        net.run_to_quiescence(10);
        let got = &net.actor::<Client>(&user.principal).unwrap().inbox;
        let results = read_discover_result(&got[0]).unwrap();
        assert_eq!(results.len(), 1);
        assert_eq!(results[0].agent, *booking.principal.as_agent().unwrap());
        assert_eq!(results[0].score, 1.0);
    }
}
