//! Agent collaboration protocols.
//!
//! - [`value`], [`id`], [`schema`], [`descriptor`], [`envelope`]: canonical
//!   encoding, identifiers, the capability description language and the
//!   signed message envelope.
//! - [`transport`]: a deterministic sim bus and a TCP backend, plus the actor
//!   runtime that drives protocol logic on either.
//! - [`a3ap`]: credentials, signatures, mutual authentication, accounting.
//! - [`arp`]: hierarchical registry with a hash-chain anchor log.
//! - [`adp`]: capability catalog, query parsing and ranked matching.
//! - [`aip`]: task orchestration by a personal agent and its workers.
//! - [`atp`]: tool managers, context and the workflow engine.

pub mod value;

pub mod a3ap;
pub mod adp;
pub mod aip;
pub mod arp;
pub mod atp;
pub mod descriptor;
pub mod envelope;
pub mod id;
pub mod schema;
pub mod testkit;
pub mod transport;
