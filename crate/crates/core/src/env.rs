//! The slicing MDP.
//!
//! Each slice serves its tasks first-come first-served: the head task
//! computes on the slice's node at `cpu_fraction * cores`, then ships its
//! data over the slice's link at `bw_fraction * capacity`. Allocations are
//! re-applied at every decision epoch and take effect on in-flight work
//! immediately.
//!
//! A step's reward depends on every task that was in the system during the
//! epoch, so it is only known once the last of those tasks completes. The
//! environment keeps one [`PendingReward`] per step and hands back
//! [`MaterializedReward`]s as they resolve.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::{LinkSample, NodeSample, TickRecord};
use crate::model::{self, LinkId, Minima, NodeId, SliceId, Task, Topology};
use crate::sim::{streams, Event, EventHandle, EventKind, SeededRng, Simulation};
use crate::workload::{self, SliceSite, TraceRecord, WorkloadConfig};

/// Relative slack allowed when checking realized values against minima.
const MINIMA_SLACK: f64 = 1e-9;
/// Per-slice observation block: queued work, queued data, cpu share, bw share, demand.
pub const SLICE_BLOCK: usize = 5;
/// Local observation: own block, own node and link utilization, epoch phase.
pub const LOCAL_WIDTH: usize = SLICE_BLOCK + 3;

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("config error: {field}: {message}")]
    Config { field: String, message: String },
    #[error("step called before reset")]
    NotReset,
    #[error("episode already reached its horizon of {0} steps")]
    EpisodeDone(usize),
    #[error("action has {got} components, expected {expected}")]
    ActionShape { expected: usize, got: usize },
    #[error("realized {what} {realized} is below its minimum {minimum}")]
    Domain { what: &'static str, realized: f64, minimum: f64 },
}

fn config_err(field: impl Into<String>, message: impl Into<String>) -> EnvError {
    EnvError::Config { field: field.into(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.5 }
    }
}

impl RewardWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self, EnvError> {
        let w = Self { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(config_err("env.weights", "alpha and beta must be non-negative"));
        }
        if (self.alpha + self.beta - 1.0).abs() > 1e-9 {
            return Err(config_err(
                "env.weights",
                format!("alpha + beta must equal 1, got {} + {} = {}", self.alpha, self.beta, self.alpha + self.beta),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlicePlacement {
    pub node: NodeId,
    pub link: LinkId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub slices: Vec<SlicePlacement>,
    #[serde(default)]
    pub weights: RewardWeights,
    #[serde(default = "default_epoch")]
    pub epoch_s: f64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_epoch")]
    pub monitor_interval_s: f64,
    /// Queued work is reported in units of "seconds of the full resource".
    #[serde(default = "default_queue_norm")]
    pub queue_norm_s: f64,
    /// Upper bound on simulated time spent draining after the horizon.
    #[serde(default = "default_drain_limit")]
    pub drain_limit_s: f64,
}

fn default_epoch() -> f64 {
    1.0
}
fn default_horizon() -> usize {
    200
}
fn default_queue_norm() -> f64 {
    1.0
}
fn default_drain_limit() -> f64 {
    10_000.0
}

impl EnvConfig {
    /// `count` slices, all sharing node 0 and link 0.
    pub fn shared(count: usize) -> Self {
        Self {
            slices: vec![SlicePlacement { node: 0, link: 0 }; count],
            weights: RewardWeights::default(),
            epoch_s: default_epoch(),
            horizon: default_horizon(),
            monitor_interval_s: default_epoch(),
            queue_norm_s: default_queue_norm(),
            drain_limit_s: default_drain_limit(),
        }
    }

    pub fn validate(&self, topology: &Topology) -> Result<(), EnvError> {
        if self.slices.is_empty() {
            return Err(config_err("env.slices", "need at least one slice"));
        }
        for (i, p) in self.slices.iter().enumerate() {
            let link = topology
                .links
                .get(p.link)
                .ok_or_else(|| config_err(format!("env.slices[{i}].link"), "no such link"))?;
            if p.node >= topology.nodes.len() {
                return Err(config_err(format!("env.slices[{i}].node"), "no such node"));
            }
            if link.endpoints.0 != p.node && link.endpoints.1 != p.node {
                return Err(config_err(format!("env.slices[{i}].link"), "link does not touch the slice's node"));
            }
        }
        self.weights.validate()?;
        for (field, v) in [
            ("env.epoch_s", self.epoch_s),
            ("env.monitor_interval_s", self.monitor_interval_s),
            ("env.queue_norm_s", self.queue_norm_s),
            ("env.drain_limit_s", self.drain_limit_s),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(config_err(field, "must be positive"));
            }
        }
        if self.horizon == 0 {
            return Err(config_err("env.horizon", "must be at least 1"));
        }
        Ok(())
    }
}

/// Where tasks come from.
#[derive(Debug, Clone, PartialEq)]
pub enum WorkloadSource {
    Generated(WorkloadConfig),
    Trace(Vec<TraceRecord>),
}

/// Dimensions of the flat observation vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsLayout {
    pub slices: usize,
    pub nodes: usize,
    pub links: usize,
}

impl ObsLayout {
    pub fn global_width(&self) -> usize {
        SLICE_BLOCK * self.slices + self.nodes + self.links + 1
    }

    pub fn action_width(&self) -> usize {
        2 * self.slices
    }

    pub fn node_offset(&self) -> usize {
        SLICE_BLOCK * self.slices
    }

    pub fn link_offset(&self) -> usize {
        self.node_offset() + self.nodes
    }

    pub fn phase_offset(&self) -> usize {
        self.link_offset() + self.links
    }
}

/// Global observation. Layout: slice blocks in slice order, then node
/// utilizations, link utilizations, and the phase within the epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub layout: ObsLayout,
    pub values: Vec<f64>,
}

impl Observation {
    pub fn slice_block(&self, slice: SliceId) -> &[f64] {
        &self.values[slice * SLICE_BLOCK..(slice + 1) * SLICE_BLOCK]
    }

    /// What one slice's actor sees.
    pub fn local(&self, slice: SliceId, placement: &SlicePlacement) -> Vec<f64> {
        local_view(&self.values, &self.layout, slice, placement)
    }
}

/// Local observation of `slice` cut from a flat global observation.
pub fn local_view(global: &[f64], layout: &ObsLayout, slice: SliceId, placement: &SlicePlacement) -> Vec<f64> {
    let mut out = Vec::with_capacity(LOCAL_WIDTH);
    out.extend_from_slice(&global[slice * SLICE_BLOCK..(slice + 1) * SLICE_BLOCK]);
    out.push(global[layout.node_offset() + placement.node]);
    out.push(global[layout.link_offset() + placement.link]);
    out.push(global[layout.phase_offset()]);
    out
}

/// Per-slice CPU and bandwidth fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointAction {
    pub cpu: Vec<f64>,
    pub bw: Vec<f64>,
}

impl JointAction {
    pub fn zeros(slices: usize) -> Self {
        Self { cpu: vec![0.0; slices], bw: vec![0.0; slices] }
    }

    /// Interleaved `[cpu_0, bw_0, cpu_1, bw_1, ...]`.
    pub fn flat(&self) -> Vec<f64> {
        self.cpu.iter().zip(&self.bw).flat_map(|(&c, &b)| [c, b]).collect()
    }

    pub fn slices(&self) -> usize {
        self.cpu.len()
    }
}

/// Clips every component to [0, 1], then rescales any node or link whose
/// shares sum above 1. `raw` is interleaved per slice as in [`JointAction::flat`].
pub fn project_action(raw: &[f64], placements: &[SlicePlacement]) -> JointAction {
    let n = placements.len();
    assert_eq!(raw.len(), 2 * n, "raw action width");
    let clip = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    let mut cpu: Vec<f64> = (0..n).map(|s| clip(raw[2 * s])).collect();
    let mut bw: Vec<f64> = (0..n).map(|s| clip(raw[2 * s + 1])).collect();
    rescale_groups(&mut cpu, placements.iter().map(|p| p.node));
    rescale_groups(&mut bw, placements.iter().map(|p| p.link));
    JointAction { cpu, bw }
}

fn rescale_groups(shares: &mut [f64], groups: impl Iterator<Item = usize> + Clone) {
    let mut totals: BTreeMap<usize, f64> = BTreeMap::new();
    for (g, &v) in groups.clone().zip(shares.iter()) {
        *totals.entry(g).or_default() += v;
    }
    for (g, v) in groups.zip(shares.iter_mut()) {
        let total = totals[&g];
        if total > 1.0 {
            *v /= total;
        }
    }
}

/// Per-slice inputs to the reward: realized and minimum delay and energy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceMeasure {
    pub delay: f64,
    pub energy: f64,
    pub min_delay: f64,
    pub min_energy: f64,
}

/// `(1/S) * sum_s (alpha * Lm/Ls + beta * Em/Es)`. A slice with no tasks
/// (`None`) contributes `alpha + beta`.
pub fn compute_reward(measures: &[Option<SliceMeasure>], w: &RewardWeights) -> Result<f64, EnvError> {
    assert!(!measures.is_empty(), "reward over zero slices");
    let mut total = 0.0;
    for m in measures {
        total += match m {
            None => w.alpha + w.beta,
            Some(m) => {
                let dl = ratio("delay", m.min_delay, m.delay)?;
                let de = ratio("energy", m.min_energy, m.energy)?;
                w.alpha * dl + w.beta * de
            }
        };
    }
    Ok(total / measures.len() as f64)
}

fn ratio(what: &'static str, minimum: f64, realized: f64) -> Result<f64, EnvError> {
    if !(minimum > 0.0) || realized < minimum * (1.0 - MINIMA_SLACK) {
        return Err(EnvError::Domain { what, realized, minimum });
    }
    Ok((minimum / realized).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceOutcome {
    pub slice_id: SliceId,
    pub tasks: usize,
    /// Mean realized delay, seconds. `None` when the slice had no tasks.
    pub l_s: Option<f64>,
    /// Total attributed energy, joules.
    pub e_s: Option<f64>,
    pub l_m: Option<f64>,
    pub e_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterializedReward {
    pub step_id: u64,
    pub reward: f64,
    /// End of the step's epoch.
    pub step_end: f64,
    /// When the last of its tasks completed (or the epoch end, if later).
    pub materialized_at: f64,
    pub slices: Vec<SliceOutcome>,
}

/// A step whose reward still waits on open tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct PendingReward {
    pub step_id: u64,
    pub step_end: f64,
    pub tasks: Vec<u64>,
    pub open_task_ids: BTreeSet<u64>,
}

pub struct StepOutcome {
    pub observation: Observation,
    pub step_id: u64,
    pub done: bool,
    /// Rewards that resolved during this step, possibly for earlier steps.
    pub materialized: Vec<MaterializedReward>,
}

/// Running audit of physical invariants.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EnvAudit {
    pub allocations_checked: u64,
    pub capacity_violations: u64,
    pub intervals_checked: u64,
    pub max_energy_residual: f64,
    pub rewards_checked: u64,
    pub reward_bound_violations: u64,
    pub thaw_order_violations: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Payload {
    Arrival { slice: SliceId, task: u64 },
    PhaseEnd { slice: SliceId, task: u64 },
    Tick,
    Epoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Compute,
    Transmit,
}

#[derive(Debug, Clone)]
struct Head {
    task: u64,
    phase: Phase,
    remaining: f64,
    completion: Option<EventHandle>,
}

#[derive(Debug, Clone, Default)]
struct SliceState {
    queue: VecDeque<u64>,
    head: Option<Head>,
    last_demand: f64,
}

#[derive(Debug, Clone)]
struct TaskRecord {
    task: Task,
    minima: Minima,
    energy: f64,
    completed_at: Option<f64>,
}

#[derive(Debug, Clone, Default)]
struct Accum {
    node_util_time: Vec<f64>,
    node_energy: Vec<f64>,
    link_tx: Vec<f64>,
    link_rx: Vec<f64>,
    attributed: f64,
    unattributed: f64,
    exact: f64,
    since: f64,
}

impl Accum {
    fn new(nodes: usize, links: usize, since: f64) -> Self {
        Self {
            node_util_time: vec![0.0; nodes],
            node_energy: vec![0.0; nodes],
            link_tx: vec![0.0; links],
            link_rx: vec![0.0; links],
            since,
            ..Default::default()
        }
    }
}

struct Run {
    episode: u64,
    step: usize,
    alloc: JointAction,
    slices: Vec<SliceState>,
    tasks: BTreeMap<u64, TaskRecord>,
    upcoming: BTreeMap<u64, Task>,
    pendings: BTreeMap<u64, PendingReward>,
    task_pendings: BTreeMap<u64, Vec<u64>>,
    resolved: Vec<MaterializedReward>,
    rngs: Vec<ChaCha8Rng>,
    next_task_id: u64,
    arrivals_open: bool,
    last_time: f64,
    epoch_tasks: BTreeSet<u64>,
    epoch_acc: Accum,
    tick_acc: Accum,
    ticks: Vec<TickRecord>,
    error: Option<EnvError>,
}

/// Immutable context shared by the event handlers.
struct Ctx<'a> {
    topology: &'a Topology,
    cfg: &'a EnvConfig,
    workload: &'a WorkloadSource,
    sites: &'a [SliceSite],
    colocated: &'a [usize],
}

pub struct SliceEnv {
    topology: Topology,
    cfg: EnvConfig,
    workload: WorkloadSource,
    sites: Vec<SliceSite>,
    colocated: Vec<usize>,
    seed: u64,
    sim: Simulation<Payload>,
    run: Option<Run>,
    audit: EnvAudit,
}

impl SliceEnv {
    pub fn new(topology: Topology, cfg: EnvConfig, workload: WorkloadSource) -> Result<Self, EnvError> {
        topology.validate().map_err(|e| config_err("topology", e.to_string()))?;
        cfg.validate(&topology)?;
        match &workload {
            WorkloadSource::Generated(w) => {
                w.validate().map_err(|e| config_err("workload", e.to_string()))?;
                if w.arrival_rate.len() != 1 && w.arrival_rate.len() != cfg.slices.len() {
                    return Err(config_err(
                        "workload.arrival_rate",
                        format!("need 1 or {} rates, got {}", cfg.slices.len(), w.arrival_rate.len()),
                    ));
                }
            }
            WorkloadSource::Trace(records) => {
                if let Some(r) = records.iter().find(|r| r.slice_id >= cfg.slices.len()) {
                    return Err(config_err("workload.trace", format!("slice {} does not exist", r.slice_id)));
                }
            }
        }
        let sites = cfg
            .slices
            .iter()
            .enumerate()
            .map(|(slice, p)| SliceSite {
                slice,
                node: p.node,
                link: p.link,
                node_cores: topology.nodes[p.node].cpu_cores as f64,
                link_capacity: topology.links[p.link].capacity_gbps,
            })
            .collect();
        let colocated = cfg
            .slices
            .iter()
            .map(|p| cfg.slices.iter().filter(|q| q.node == p.node).count())
            .collect();
        Ok(Self {
            topology,
            cfg,
            workload,
            sites,
            colocated,
            seed: 0,
            sim: Simulation::new(),
            run: None,
            audit: EnvAudit::default(),
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn workload(&self) -> &WorkloadSource {
        &self.workload
    }

    pub fn slices(&self) -> usize {
        self.cfg.slices.len()
    }

    pub fn placements(&self) -> &[SlicePlacement] {
        &self.cfg.slices
    }

    pub fn layout(&self) -> ObsLayout {
        ObsLayout { slices: self.slices(), nodes: self.topology.nodes.len(), links: self.topology.links.len() }
    }

    pub fn audit(&self) -> &EnvAudit {
        &self.audit
    }

    pub fn now(&self) -> f64 {
        self.sim.now()
    }

    pub fn steps_taken(&self) -> usize {
        self.run.as_ref().map_or(0, |r| r.step)
    }

    /// Records the event trace of subsequent episodes (for audits).
    pub fn enable_trace(&mut self) {
        self.sim = Simulation::new().with_trace();
    }

    pub fn trace(&self) -> Option<&[crate::sim::TraceEntry]> {
        self.sim.trace()
    }

    /// Starts a fresh episode. Workload randomness comes from
    /// `(seed, episode)` so episodes are reproducible on their own.
    pub fn reset(&mut self, seed: u64, episode: u64) -> Observation {
        self.seed = seed;
        let traced = self.sim.trace().is_some();
        self.sim = Simulation::new();
        if traced {
            self.sim = Simulation::new().with_trace();
        }
        let s = self.slices();
        let (nodes, links) = (self.topology.nodes.len(), self.topology.links.len());
        let mut run = Run {
            episode,
            step: 0,
            alloc: JointAction::zeros(s),
            slices: vec![SliceState::default(); s],
            tasks: BTreeMap::new(),
            upcoming: BTreeMap::new(),
            pendings: BTreeMap::new(),
            task_pendings: BTreeMap::new(),
            resolved: Vec::new(),
            rngs: (0..s).map(|i| SeededRng::new(seed, streams::workload(episode, i)).rng()).collect(),
            next_task_id: 0,
            arrivals_open: true,
            last_time: 0.0,
            epoch_tasks: BTreeSet::new(),
            epoch_acc: Accum::new(nodes, links, 0.0),
            tick_acc: Accum::new(nodes, links, 0.0),
            ticks: Vec::new(),
            error: None,
        };
        match &self.workload {
            WorkloadSource::Generated(wcfg) => {
                for site in &self.sites {
                    let id = run.next_task_id;
                    run.next_task_id += 1;
                    let task = workload::next_task(site, &mut run.rngs[site.slice], wcfg, 0.0, id);
                    self.sim
                        .schedule(Event::new(task.arrival, EventKind::TaskArrival, Payload::Arrival { slice: site.slice, task: id }))
                        .expect("arrival in the future");
                    run.upcoming.insert(id, task);
                }
            }
            WorkloadSource::Trace(records) => {
                for r in records {
                    let id = run.next_task_id;
                    run.next_task_id += 1;
                    let site = &self.sites[r.slice_id];
                    let task = Task {
                        id,
                        slice_id: r.slice_id,
                        node_id: site.node,
                        link_id: site.link,
                        arrival: r.arrival_s,
                        cpu_work: r.cpu_work,
                        data_volume: r.data_volume,
                        demand_fraction: r.demand_fraction,
                    };
                    self.sim
                        .schedule(Event::new(task.arrival, EventKind::TaskArrival, Payload::Arrival { slice: r.slice_id, task: id }))
                        .expect("trace arrival in the future");
                    run.upcoming.insert(id, task);
                }
            }
        }
        self.sim
            .schedule(Event::new(self.cfg.monitor_interval_s, EventKind::MonitorTick, Payload::Tick))
            .expect("tick in the future");
        let obs = observe(&self.ctx(), &run, self.sim.now());
        self.run = Some(run);
        obs
    }

    fn ctx(&self) -> Ctx<'_> {
        Ctx {
            topology: &self.topology,
            cfg: &self.cfg,
            workload: &self.workload,
            sites: &self.sites,
            colocated: &self.colocated,
        }
    }

    /// Applies `raw` (interleaved cpu/bw per slice, projected first) for one
    /// decision epoch.
    pub fn step(&mut self, raw: &[f64]) -> Result<StepOutcome, EnvError> {
        let s = self.slices();
        if raw.len() != 2 * s {
            return Err(EnvError::ActionShape { expected: 2 * s, got: raw.len() });
        }
        let horizon = self.cfg.horizon;
        let run = self.run.as_mut().ok_or(EnvError::NotReset)?;
        if run.step >= horizon {
            return Err(EnvError::EpisodeDone(horizon));
        }
        let action = project_action(raw, &self.cfg.slices);
        let ctx = Ctx {
            topology: &self.topology,
            cfg: &self.cfg,
            workload: &self.workload,
            sites: &self.sites,
            colocated: &self.colocated,
        };
        let sim = &mut self.sim;
        let audit = &mut self.audit;
        let t0 = sim.now();
        run.epoch_acc = Accum::new(self.topology.nodes.len(), self.topology.links.len(), t0);
        run.epoch_tasks = run
            .slices
            .iter()
            .flat_map(|st| st.head.iter().map(|h| h.task).chain(st.queue.iter().copied()))
            .collect();
        apply_allocation(&ctx, run, sim, audit, action);
        let t_end = t0 + self.cfg.epoch_s;
        sim.schedule(Event::new(t_end, EventKind::DecisionEpoch, Payload::Epoch)).expect("epoch end");
        sim.run_until(t_end, |sim, ev| handle(&ctx, run, sim, audit, ev));
        advance(&ctx, run, audit, t_end);

        let step_id = run.step as u64;
        let tasks: Vec<u64> = run.epoch_tasks.iter().copied().collect();
        let open: BTreeSet<u64> =
            tasks.iter().copied().filter(|id| run.tasks[id].completed_at.is_none()).collect();
        let pending = PendingReward { step_id, step_end: t_end, tasks, open_task_ids: open };
        if pending.open_task_ids.is_empty() {
            materialize(&ctx, run, audit, pending, t_end);
        } else {
            for id in &pending.open_task_ids {
                run.task_pendings.entry(*id).or_default().push(step_id);
            }
            run.pendings.insert(step_id, pending);
        }
        run.step += 1;
        let done = run.step >= horizon;
        if let Some(e) = run.error.take() {
            return Err(e);
        }
        let observation = observe(&ctx, run, t_end);
        Ok(StepOutcome { observation, step_id, done, materialized: std::mem::take(&mut run.resolved) })
    }

    /// After the horizon: stops arrivals, splits resources equally among
    /// co-located slices, and runs until every pending reward resolves or
    /// the drain limit is hit. Returns the resolved rewards and the ids of
    /// steps left unresolved.
    pub fn drain(&mut self) -> Result<(Vec<MaterializedReward>, Vec<u64>), EnvError> {
        let run = self.run.as_mut().ok_or(EnvError::NotReset)?;
        let ctx = Ctx {
            topology: &self.topology,
            cfg: &self.cfg,
            workload: &self.workload,
            sites: &self.sites,
            colocated: &self.colocated,
        };
        let sim = &mut self.sim;
        let audit = &mut self.audit;
        run.arrivals_open = false;
        let full = project_action(&vec![1.0; 2 * ctx.sites.len()], &ctx.cfg.slices);
        apply_allocation(&ctx, run, sim, audit, full);
        let limit = sim.now() + self.cfg.drain_limit_s;
        while !run.pendings.is_empty() && sim.now() < limit {
            let t_end = (sim.now() + self.cfg.epoch_s).min(limit);
            sim.run_until(t_end, |sim, ev| handle(&ctx, run, sim, audit, ev));
            advance(&ctx, run, audit, t_end);
        }
        if let Some(e) = run.error.take() {
            return Err(e);
        }
        let stale = run.pendings.keys().copied().collect();
        Ok((std::mem::take(&mut run.resolved), stale))
    }

    pub fn open_pendings(&self) -> Vec<&PendingReward> {
        self.run.as_ref().map(|r| r.pendings.values().collect()).unwrap_or_default()
    }

    /// Monitor records collected so far this episode.
    pub fn ticks(&self) -> &[TickRecord] {
        self.run.as_ref().map_or(&[], |r| &r.ticks)
    }

    /// Count, mean delay and mean attributed energy of completed tasks.
    pub fn task_stats(&self) -> (usize, f64, f64) {
        let Some(run) = self.run.as_ref() else { return (0, 0.0, 0.0) };
        let (mut n, mut delay, mut energy) = (0usize, 0.0, 0.0);
        for rec in run.tasks.values() {
            if let Some(done) = rec.completed_at {
                n += 1;
                delay += done - rec.task.arrival;
                energy += rec.energy;
            }
        }
        if n == 0 {
            return (0, 0.0, 0.0);
        }
        (n, delay / n as f64, energy / n as f64)
    }

    pub fn current_allocation(&self) -> Option<&JointAction> {
        self.run.as_ref().map(|r| &r.alloc)
    }

    /// Observation of the current state without stepping.
    pub fn observe(&self) -> Result<Observation, EnvError> {
        let run = self.run.as_ref().ok_or(EnvError::NotReset)?;
        Ok(observe(&self.ctx(), run, self.sim.now()))
    }
}

fn apply_allocation(ctx: &Ctx, run: &mut Run, sim: &mut Simulation<Payload>, audit: &mut EnvAudit, action: JointAction) {
    advance(ctx, run, audit, sim.now());
    audit.allocations_checked += 1;
    let mut node_cores = vec![0.0; ctx.topology.nodes.len()];
    let mut link_bw = vec![0.0; ctx.topology.links.len()];
    for (s, site) in ctx.sites.iter().enumerate() {
        node_cores[site.node] += action.cpu[s] * site.node_cores;
        link_bw[site.link] += action.bw[s] * site.link_capacity;
    }
    let over_nodes = ctx
        .topology
        .nodes
        .iter()
        .zip(&node_cores)
        .any(|(n, &used)| used > n.cpu_cores as f64 * (1.0 + 1e-12));
    let over_links = ctx
        .topology
        .links
        .iter()
        .zip(&link_bw)
        .any(|(l, &used)| used > l.capacity_gbps * (1.0 + 1e-12));
    if over_nodes || over_links {
        audit.capacity_violations += 1;
    }
    run.alloc = action;
    for s in 0..ctx.sites.len() {
        reschedule(ctx, run, sim, s);
    }
}

fn rate(ctx: &Ctx, run: &Run, slice: SliceId, phase: Phase) -> f64 {
    let site = &ctx.sites[slice];
    match phase {
        Phase::Compute => run.alloc.cpu[slice] * site.node_cores,
        Phase::Transmit => run.alloc.bw[slice] * site.link_capacity,
    }
}

fn reschedule(ctx: &Ctx, run: &mut Run, sim: &mut Simulation<Payload>, slice: SliceId) {
    let Some(head) = run.slices[slice].head.as_ref() else { return };
    let (task, phase, remaining, old) = (head.task, head.phase, head.remaining, head.completion);
    if let Some(h) = old {
        sim.cancel(h);
    }
    let r = rate(ctx, run, slice, phase);
    let handle = if remaining <= 0.0 {
        Some(sim.now())
    } else if r > 0.0 {
        Some(sim.now() + remaining / r)
    } else {
        None
    }
    .map(|t| {
        sim.schedule(Event::new(t, EventKind::TaskCompletion, Payload::PhaseEnd { slice, task }))
            .expect("completion not in the past")
    });
    run.slices[slice].head.as_mut().unwrap().completion = handle;
}

/// Integrates progress, power and attribution from `run.last_time` to `now`
/// under the current (constant) allocation.
fn advance(ctx: &Ctx, run: &mut Run, _audit: &mut EnvAudit, now: f64) {
    let dt = now - run.last_time;
    if dt <= 0.0 {
        return;
    }
    run.last_time = now;
    for (n, node) in ctx.topology.nodes.iter().enumerate() {
        let mut util = 0.0;
        let mut active = 0;
        for (s, site) in ctx.sites.iter().enumerate() {
            if site.node != n {
                continue;
            }
            if let Some(h) = &run.slices[s].head {
                active += 1;
                if h.phase == Phase::Compute {
                    util += run.alloc.cpu[s];
                }
            }
        }
        let util = util.min(1.0);
        let exact = node.power_curve.eval(util) * dt;
        let mut attributed = 0.0;
        for (s, site) in ctx.sites.iter().enumerate() {
            if site.node != n {
                continue;
            }
            let Some(h) = &run.slices[s].head else { continue };
            let own = if h.phase == Phase::Compute { run.alloc.cpu[s].min(util) } else { 0.0 };
            let e = model::attribute_unchecked(&node.power_curve, dt, util, own, active);
            attributed += e;
            let id = h.task;
            run.tasks.get_mut(&id).expect("head task recorded").energy += e;
        }
        let unattributed = if active == 0 { exact } else { 0.0 };
        for acc in [&mut run.epoch_acc, &mut run.tick_acc] {
            acc.node_util_time[n] += util * dt;
            acc.node_energy[n] += exact;
            acc.attributed += attributed;
            acc.unattributed += unattributed;
            acc.exact += exact;
        }
    }
    for s in 0..ctx.sites.len() {
        let site = ctx.sites[s];
        let Some(phase) = run.slices[s].head.as_ref().map(|h| h.phase) else { continue };
        let r = rate(ctx, run, s, phase);
        if phase == Phase::Transmit {
            let link = &ctx.topology.links[site.link];
            let sent = r * dt;
            for acc in [&mut run.epoch_acc, &mut run.tick_acc] {
                if link.endpoints.0 == site.node {
                    acc.link_tx[site.link] += sent;
                } else {
                    acc.link_rx[site.link] += sent;
                }
            }
        }
        let head = run.slices[s].head.as_mut().unwrap();
        head.remaining = (head.remaining - r * dt).max(0.0);
    }
}

fn handle(ctx: &Ctx, run: &mut Run, sim: &mut Simulation<Payload>, audit: &mut EnvAudit, ev: Event<Payload>) {
    let now = ev.fire_time;
    advance(ctx, run, audit, now);
    match ev.payload {
        Payload::Arrival { slice, task } => {
            let t = run.upcoming.remove(&task).expect("scheduled arrival");
            if !run.arrivals_open {
                return;
            }
            let minima = model::minima(&t, ctx.topology, ctx.colocated[slice]);
            run.slices[slice].last_demand = t.demand_fraction;
            run.tasks.insert(task, TaskRecord { task: t, minima, energy: 0.0, completed_at: None });
            run.epoch_tasks.insert(task);
            if run.slices[slice].head.is_none() {
                start_service(run, slice, task);
                reschedule(ctx, run, sim, slice);
            } else {
                run.slices[slice].queue.push_back(task);
            }
            if let WorkloadSource::Generated(wcfg) = ctx.workload {
                let id = run.next_task_id;
                run.next_task_id += 1;
                let next = workload::next_task(&ctx.sites[slice], &mut run.rngs[slice], wcfg, now, id);
                sim.schedule(Event::new(next.arrival, EventKind::TaskArrival, Payload::Arrival { slice, task: id }))
                    .expect("arrival after now");
                run.upcoming.insert(id, next);
            }
        }
        Payload::PhaseEnd { slice, task } => {
            let head = run.slices[slice].head.as_mut().expect("phase end without head");
            debug_assert_eq!(head.task, task);
            head.completion = None;
            head.remaining = 0.0;
            if head.phase == Phase::Compute {
                head.phase = Phase::Transmit;
                head.remaining = run.tasks[&task].task.data_volume;
            } else {
                run.slices[slice].head = None;
                complete_task(ctx, run, audit, task, now);
                if let Some(next) = run.slices[slice].queue.pop_front() {
                    start_service(run, slice, next);
                }
            }
            reschedule(ctx, run, sim, slice);
        }
        Payload::Tick => {
            record_tick(ctx, run, audit, now);
            sim.schedule(Event::new(now + ctx.cfg.monitor_interval_s, EventKind::MonitorTick, Payload::Tick))
                .expect("tick after now");
        }
        Payload::Epoch => {}
    }
}

fn start_service(run: &mut Run, slice: SliceId, task: u64) {
    let work = run.tasks[&task].task.cpu_work;
    run.slices[slice].head = Some(Head { task, phase: Phase::Compute, remaining: work, completion: None });
}

fn complete_task(ctx: &Ctx, run: &mut Run, audit: &mut EnvAudit, task: u64, now: f64) {
    run.tasks.get_mut(&task).unwrap().completed_at = Some(now);
    let Some(steps) = run.task_pendings.remove(&task) else { return };
    for step in steps {
        let done = {
            let p = run.pendings.get_mut(&step).expect("pending for step");
            p.open_task_ids.remove(&task);
            p.open_task_ids.is_empty()
        };
        if done {
            let p = run.pendings.remove(&step).unwrap();
            materialize(ctx, run, audit, p, now);
        }
    }
}

fn materialize(ctx: &Ctx, run: &mut Run, audit: &mut EnvAudit, pending: PendingReward, now: f64) {
    debug_assert!(pending.open_task_ids.is_empty());
    let s = ctx.sites.len();
    let mut sums = vec![(0usize, 0.0, 0.0, 0.0, 0.0); s];
    for id in &pending.tasks {
        let rec = &run.tasks[id];
        let done = rec.completed_at.expect("materializing with an open task");
        let e = &mut sums[rec.task.slice_id];
        e.0 += 1;
        e.1 += done - rec.task.arrival;
        e.2 += rec.energy;
        e.3 += rec.minima.delay;
        e.4 += rec.minima.energy;
    }
    let mut measures = Vec::with_capacity(s);
    let mut outcomes = Vec::with_capacity(s);
    for (slice, &(n, delay, energy, min_delay, min_energy)) in sums.iter().enumerate() {
        if n == 0 {
            measures.push(None);
            outcomes.push(SliceOutcome { slice_id: slice, tasks: 0, l_s: None, e_s: None, l_m: None, e_m: None });
        } else {
            let k = n as f64;
            let m = SliceMeasure { delay: delay / k, energy, min_delay: min_delay / k, min_energy };
            measures.push(Some(m));
            outcomes.push(SliceOutcome {
                slice_id: slice,
                tasks: n,
                l_s: Some(m.delay),
                e_s: Some(m.energy),
                l_m: Some(m.min_delay),
                e_m: Some(m.min_energy),
            });
        }
    }
    let reward = match compute_reward(&measures, &ctx.cfg.weights) {
        Ok(r) => r,
        Err(e) => {
            run.error.get_or_insert(e);
            f64::NAN
        }
    };
    audit.rewards_checked += 1;
    if !(reward > 0.0 && reward <= 1.0) {
        audit.reward_bound_violations += 1;
    }
    let at = now.max(pending.step_end);
    if at < pending.step_end {
        audit.thaw_order_violations += 1;
    }
    run.resolved.push(MaterializedReward {
        step_id: pending.step_id,
        reward,
        step_end: pending.step_end,
        materialized_at: at,
        slices: outcomes,
    });
}

fn record_tick(ctx: &Ctx, run: &mut Run, audit: &mut EnvAudit, now: f64) {
    let acc = std::mem::replace(
        &mut run.tick_acc,
        Accum::new(ctx.topology.nodes.len(), ctx.topology.links.len(), now),
    );
    let span = now - acc.since;
    if span <= 0.0 {
        return;
    }
    let nodes = ctx
        .topology
        .nodes
        .iter()
        .enumerate()
        .map(|(n, _)| NodeSample {
            node_id: n,
            cpu_util: (acc.node_util_time[n] / span).clamp(0.0, 1.0),
            power_w: acc.node_energy[n] / span,
        })
        .collect();
    let links = ctx
        .topology
        .links
        .iter()
        .enumerate()
        .map(|(l, _)| LinkSample { link_id: l, tx_gbps: acc.link_tx[l] / span, rx_gbps: acc.link_rx[l] / span })
        .collect();
    let residual = ((acc.attributed + acc.unattributed) - acc.exact).abs() / acc.exact.max(f64::MIN_POSITIVE);
    audit.intervals_checked += 1;
    audit.max_energy_residual = audit.max_energy_residual.max(residual);
    run.ticks.push(TickRecord {
        time_s: now,
        episode: run.episode,
        nodes,
        links,
        attributed_j: acc.attributed,
        unattributed_j: acc.unattributed,
        exact_j: acc.exact,
    });
}

fn observe(ctx: &Ctx, run: &Run, now: f64) -> Observation {
    let layout = ObsLayout { slices: ctx.sites.len(), nodes: ctx.topology.nodes.len(), links: ctx.topology.links.len() };
    let mut values = Vec::with_capacity(layout.global_width());
    let norm = ctx.cfg.queue_norm_s;
    for (s, site) in ctx.sites.iter().enumerate() {
        let st = &run.slices[s];
        let (mut work, mut data) = (0.0, 0.0);
        if let Some(h) = &st.head {
            let t = &run.tasks[&h.task].task;
            match h.phase {
                Phase::Compute => {
                    work += h.remaining;
                    data += t.data_volume;
                }
                Phase::Transmit => data += h.remaining,
            }
        }
        for id in &st.queue {
            let t = &run.tasks[id].task;
            work += t.cpu_work;
            data += t.data_volume;
        }
        values.push(work / (site.node_cores * norm));
        values.push(data / (site.link_capacity * norm));
        values.push(run.alloc.cpu[s]);
        values.push(run.alloc.bw[s]);
        values.push(st.last_demand);
    }
    let span = now - run.epoch_acc.since;
    for n in 0..layout.nodes {
        let u = if span > 0.0 { run.epoch_acc.node_util_time[n] / span } else { 0.0 };
        values.push(u.clamp(0.0, 1.0));
    }
    for (l, link) in ctx.topology.links.iter().enumerate() {
        let u = if span > 0.0 {
            (run.epoch_acc.link_tx[l] + run.epoch_acc.link_rx[l]) / (span * link.capacity_gbps)
        } else {
            0.0
        };
        values.push(u.clamp(0.0, 1.0));
    }
    let phase = (now / ctx.cfg.epoch_s).fract();
    values.push(if phase > 1.0 - 1e-9 { 0.0 } else { phase });
    Observation { layout, values }
}
