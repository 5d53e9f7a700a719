//! Scenario runner for the agent collaboration protocols: loads a scenario,
//! deploys every party on the sim bus or over sockets, records a transcript
//! and replays it offline.

pub mod config;
pub mod deploy;
pub mod replay;
pub mod run;
pub mod serve;
pub mod transcript;

pub use config::{ConfigError, ScenarioConfig};
pub use replay::{replay, Verdict, Violation};
pub use run::{run_scenario, run_with_seed, RunError, Transport};
pub use transcript::Transcript;
