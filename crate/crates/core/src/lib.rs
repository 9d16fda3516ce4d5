//! Network-slicing simulator with a multi-agent reinforcement learning
//! control plane.

pub mod agents;
pub mod config;
pub mod env;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod replay;
pub mod sim;
pub mod transfer;
pub mod workload;

pub use env::{
    compute_reward, project_action, EnvConfig, JointAction, MaterializedReward, Observation, RewardWeights,
    SliceEnv, SlicePlacement, WorkloadSource,
};
pub use model::{PowerCurve, Task, Topology};
pub use sim::{SeededRng, Simulation};
