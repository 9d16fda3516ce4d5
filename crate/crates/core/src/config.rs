//! Experiment configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::{BaselineKind, DqnConfig, MaddpgConfig};
use crate::env::{EnvConfig, WorkloadSource};
use crate::model::{LinkSpec, NodeSpec, PowerCurve, Topology};
use crate::metrics::Format;
use crate::transfer::NewAgentInit;
use crate::workload::{self, WorkloadConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
#[error("config error: {field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { field: field.into(), message: message.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub id: usize,
    #[serde(default = "default_cores")]
    pub cpu_cores: u32,
    /// Inline `(utilization, watts)` points.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_curve: Option<PowerCurve>,
    /// Measured curve as a two-column CSV, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power_curve_file: Option<PathBuf>,
}

fn default_cores() -> u32 {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyConfig {
    pub nodes: Vec<NodeConfig>,
    pub links: Vec<LinkSpec>,
}

impl TopologyConfig {
    pub fn three_site() -> Self {
        Self {
            nodes: (0..3).map(|id| NodeConfig { id, cpu_cores: 4, power_curve: None, power_curve_file: None }).collect(),
            links: Topology::three_site_default().links,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadBlock {
    #[serde(default = "default_rate")]
    pub arrival_rate: Vec<f64>,
    #[serde(default = "default_low")]
    pub demand_low: f64,
    #[serde(default = "default_high")]
    pub demand_high: f64,
    #[serde(default = "default_scale")]
    pub work_scale: f64,
    #[serde(default = "default_scale")]
    pub volume_scale: f64,
    /// Replays this trace instead of generating tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
}

fn default_rate() -> Vec<f64> {
    vec![0.5]
}
fn default_low() -> f64 {
    0.27
}
fn default_high() -> f64 {
    0.33
}
fn default_scale() -> f64 {
    1.0
}

impl WorkloadBlock {
    pub fn generator(&self) -> WorkloadConfig {
        WorkloadConfig {
            arrival_rate: self.arrival_rate.clone(),
            demand_low: self.demand_low,
            demand_high: self.demand_high,
            work_scale: self.work_scale,
            volume_scale: self.volume_scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Maddpg,
    Dqn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentBlock {
    pub algorithm: Algorithm,
    #[serde(default)]
    pub maddpg: MaddpgConfig,
    #[serde(default)]
    pub dqn: DqnConfig,
    /// Per-slice `(cpu, bw)` shares for the static baseline; default `1/S`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub static_fractions: Option<Vec<(f64, f64)>>,
    #[serde(default)]
    pub transfer_init: NewAgentInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingBlock {
    pub episodes: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: u64,
    pub seeds: Vec<u64>,
    /// Policies for `compare` when none are given on the command line.
    #[serde(default = "default_policies")]
    pub compare: Vec<String>,
}

fn default_eval_every() -> u64 {
    10
}
fn default_eval_episodes() -> u64 {
    2
}
fn default_policies() -> Vec<String> {
    [BaselineKind::Random, BaselineKind::Full, BaselineKind::StaticPortion].iter().map(|k| k.name().to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
    #[serde(default = "default_format")]
    pub format: Format,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}
fn default_format() -> Format {
    Format::JsonLines
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self { dir: default_out(), format: default_format() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub topology: TopologyConfig,
    pub workload: WorkloadBlock,
    pub env: EnvConfig,
    pub agent: AgentBlock,
    pub training: TrainingBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

/// A validated config with its external files loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub config: ExperimentConfig,
    pub topology: Topology,
    pub workload: WorkloadSource,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.contains("field"))
                .map(str::to_string)
                .unwrap_or_else(|| "<json>".into());
            ConfigError::new(field, msg)
        })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::new(
                "schema_version",
                format!("unsupported version {} (expected {SCHEMA_VERSION})", cfg.schema_version),
            ));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Resolved, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new("--config", format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text)?.resolve(base)
    }

    /// Loads referenced files (relative to `base`) and checks every constraint.
    pub fn resolve(mut self, base: &Path) -> Result<Resolved, ConfigError> {
        let mut nodes = Vec::with_capacity(self.topology.nodes.len());
        for (i, n) in self.topology.nodes.iter_mut().enumerate() {
            let curve = match (&n.power_curve, &n.power_curve_file) {
                (Some(_), Some(_)) => {
                    return Err(ConfigError::new(
                        format!("topology.nodes[{i}]"),
                        "give power_curve or power_curve_file, not both",
                    ))
                }
                (Some(c), None) => c.clone(),
                (None, Some(f)) => {
                    let path = base.join(f);
                    let c = PowerCurve::from_csv_path(&path)
                        .map_err(|e| ConfigError::new(format!("topology.nodes[{i}].power_curve_file"), e.to_string()))?;
                    // Snapshot the curve so the resolved config is self-contained.
                    n.power_curve = Some(c.clone());
                    n.power_curve_file = None;
                    c
                }
                (None, None) => PowerCurve::linear(100.0, 200.0).expect("valid default"),
            };
            nodes.push(NodeSpec { id: n.id, cpu_cores: n.cpu_cores, power_curve: curve });
        }
        let topology = Topology { nodes, links: self.topology.links.clone() };
        topology.validate().map_err(|e| ConfigError::new("topology", e.to_string()))?;
        self.env.validate(&topology).map_err(|e| match e {
            crate::env::EnvError::Config { field, message } => ConfigError::new(field, message),
            other => ConfigError::new("env", other.to_string()),
        })?;
        let workload = match &self.workload.trace {
            Some(f) => {
                let path = base.join(f);
                let records = workload::replay_trace(&path)
                    .map_err(|e| ConfigError::new("workload.trace", format!("{}: {e}", path.display())))?;
                WorkloadSource::Trace(records)
            }
            None => {
                let generator = self.workload.generator();
                generator.validate().map_err(|e| match e {
                    workload::WorkloadError::Config { field, message } => {
                        ConfigError::new(format!("workload.{field}"), message)
                    }
                    other => ConfigError::new("workload", other.to_string()),
                })?;
                WorkloadSource::Generated(generator)
            }
        };
        if let WorkloadSource::Generated(w) = &workload {
            let s = self.env.slices.len();
            if w.arrival_rate.len() != 1 && w.arrival_rate.len() != s {
                return Err(ConfigError::new("workload.arrival_rate", format!("need 1 or {s} entries")));
            }
        }
        if self.training.seeds.is_empty() {
            return Err(ConfigError::new("training.seeds", "need at least one seed"));
        }
        if self.training.eval_every == 0 {
            return Err(ConfigError::new("training.eval_every", "must be at least 1"));
        }
        if let Some(f) = &self.agent.static_fractions {
            crate::agents::BaselinePolicy::with_fractions(BaselineKind::StaticPortion, f.clone(), &self.env.slices)
                .map_err(|e| ConfigError::new("agent.static_fractions", e.to_string()))?;
        }
        let m = &self.agent.maddpg;
        if m.batch == 0 || m.buffer == 0 || m.frozen_cap == 0 || m.update_every == 0 {
            return Err(ConfigError::new("agent.maddpg", "batch, buffer, frozen_cap and update_every must be positive"));
        }
        let d = &self.agent.dqn;
        if d.levels < 2 || d.batch == 0 || d.buffer == 0 || d.frozen_cap == 0 || d.update_every == 0 {
            return Err(ConfigError::new("agent.dqn", "levels >= 2; batch, buffer, frozen_cap, update_every positive"));
        }
        if self.agent.algorithm == Algorithm::Dqn {
            let size = crate::agents::action_space_report(self.env.slices.len(), d.levels).dqn_joint_actions;
            if size.is_none_or(|n| n > 100_000) {
                return Err(ConfigError::new("agent.dqn.levels", "joint action grid too large for DQN"));
            }
        }
        Ok(Resolved { config: self, topology, workload })
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
