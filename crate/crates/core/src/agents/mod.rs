//! Allocation policies.

pub mod baseline;
pub mod dqn;
pub mod maddpg;

pub use baseline::{BaselineKind, BaselinePolicy};
pub use dqn::{action_grid, action_space_report, ActionSpaceReport, DqnAgent, DqnConfig};
pub use maddpg::{AgentBundle, AgentError, Maddpg, MaddpgConfig, PopulationManifest, UpdateReport};
