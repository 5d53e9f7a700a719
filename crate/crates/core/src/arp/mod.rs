//! Agent registration: a tree of registry servers holding agent records,
//! four-phase registration and a verifiable anchor log of every state change.

pub mod anchor;
pub mod node;
pub mod service;

pub use anchor::{genesis_head, verify_anchor, AnchorEntry, AnchorLog};
pub use node::{
    registry_path_of, AgentRecord, ArpError, CapabilityChange, Compliance, CompliancePolicy, DeregisterRequest, NodeSnapshot,
    Phase, RegisterOutcome, RegisterRequest, RegistrationResult, RegistryNode, RegistryTree, Route, Status, TagDenylist,
    UpdateRequest,
};
pub use service::{change_payload, RegistryService};

use crate::a3ap::sign::Identity;
use crate::descriptor::CapabilityDescriptor;
use crate::envelope::Protocol;
use crate::id::Principal;
use crate::transport::ActorCtx;

/// Queues a signed `register_request` from `agent` to its registry.
pub fn send_register(agent: &Identity, descriptor: &CapabilityDescriptor, ctx: &mut ActorCtx) -> crate::envelope::MsgId {
    let body = RegisterRequest {
        credential: agent.credential.clone().expect("registering agents hold a credential"),
        descriptor: descriptor.clone(),
    };
    let registry: Principal = descriptor.agent.registry_path().registry_service().into();
    agent.request(ctx, Protocol::Arp, "register_request", &registry, node::payload_of(&body))
}
