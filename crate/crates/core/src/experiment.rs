//! Training, evaluation, comparison and transfer runs.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::maddpg::{read_json, write_json};
use crate::agents::{AgentError, BaselineKind, BaselinePolicy, DqnAgent, Maddpg, MaddpgConfig, PopulationManifest};
use crate::config::{Algorithm, ConfigError, Resolved};
use crate::env::{EnvAudit, EnvError, MaterializedReward, Observation, SliceEnv, WorkloadSource};
use crate::metrics::{self, CurveKind, CurvePoint, CurveWriter, MetricRun, MetricsError, PolicyRun, SummaryRow};
use crate::replay::{ReplayBuffer, ReplayStats, Transition};
use crate::sim::{streams, SeededRng};
use crate::transfer::{self, TransferError};
use crate::workload;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("checkpoint has {checkpoint} slices, config has {config}")]
    ManifestMismatch { checkpoint: usize, config: usize },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Transfer(#[from] TransferError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

impl ExperimentError {
    pub fn is_config(&self) -> bool {
        matches!(self, ExperimentError::Config(_))
    }
}

type Result<T> = std::result::Result<T, ExperimentError>;

/// Environment seed used for evaluation episodes of a given seed, kept
/// apart from the training episodes' workload streams.
pub fn eval_seed(seed: u64) -> u64 {
    seed ^ 0x5EED_E7A1_0000_0000
}

pub fn build_env(r: &Resolved) -> Result<SliceEnv> {
    Ok(SliceEnv::new(r.topology.clone(), r.config.env.clone(), r.workload.clone())?)
}

/// Anything that maps observations to raw joint actions.
pub enum Controller {
    Baseline { policy: BaselinePolicy, rng: ChaCha8Rng },
    Maddpg(Maddpg),
    Dqn(DqnAgent),
}

impl Controller {
    pub fn baseline(kind: BaselineKind, r: &Resolved, seed: u64) -> Result<Self> {
        let placements = &r.config.env.slices;
        let policy = match &r.config.agent.static_fractions {
            Some(f) if kind == BaselineKind::StaticPortion => {
                BaselinePolicy::with_fractions(kind, f.clone(), placements)
                    .map_err(|e| ConfigError::new("agent.static_fractions", e.to_string()))?
            }
            _ => BaselinePolicy::new(kind, placements.len()),
        };
        Ok(Controller::Baseline { policy, rng: SeededRng::new(seed, streams::BASELINE).rng() })
    }

    /// A baseline name (`random`, `full`, `static`) or a checkpoint directory.
    pub fn resolve(spec: &str, r: &Resolved, seed: u64) -> Result<(String, Self)> {
        if let Some(kind) = BaselineKind::parse(spec) {
            return Ok((kind.name().to_string(), Self::baseline(kind, r, seed)?));
        }
        let ctl = Self::load(Path::new(spec))?;
        ctl.check_slices(r.config.env.slices.len())?;
        let name = match &ctl {
            Controller::Dqn(_) => "dqn",
            _ => "maddpg",
        };
        Ok((name.to_string(), ctl))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        if dir.join("manifest.json").exists() {
            Ok(Controller::Maddpg(Maddpg::load(dir)?))
        } else if dir.join("dqn.json").exists() {
            Ok(Controller::Dqn(read_json(&dir.join("dqn.json"))?))
        } else {
            Err(ExperimentError::Other(format!("{} is neither a baseline name nor a checkpoint", dir.display())))
        }
    }

    pub fn check_slices(&self, config: usize) -> Result<()> {
        let checkpoint = match self {
            Controller::Maddpg(p) => p.slices(),
            Controller::Dqn(d) => d.grid[0].len() / 2,
            Controller::Baseline { policy, .. } => policy.fractions.len(),
        };
        if checkpoint != config {
            return Err(ExperimentError::ManifestMismatch { checkpoint, config });
        }
        Ok(())
    }

    /// Greedy action.
    pub fn act(&mut self, obs: &Observation, env: &SliceEnv) -> Result<Vec<f64>> {
        Ok(match self {
            Controller::Baseline { policy, rng } => policy.act(env.placements(), rng).flat(),
            Controller::Maddpg(p) => p.act(&obs.values, false, &mut NoRng)?,
            Controller::Dqn(d) => d.grid[d.act_greedy(&obs.values, 0.0, &mut NoRng)?].clone(),
        })
    }
}

/// Stands in where a greedy path needs an RNG type but never draws.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("greedy action drew randomness")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("greedy action drew randomness")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("greedy action drew randomness")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub episode: u64,
    pub mean_reward: f64,
    pub rewards: Vec<MaterializedReward>,
    pub stale_steps: usize,
    pub tasks: usize,
    pub mean_delay: f64,
    pub mean_energy: f64,
}

/// Audit counters gathered over every run of an experiment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunAudit {
    pub env: EnvAudit,
    pub replay: ReplayStats,
    pub rewards: u64,
    pub reward_bound_violations: u64,
    pub stale_steps: u64,
}

impl RunAudit {
    pub fn merge(&mut self, other: &RunAudit) {
        let e = &mut self.env;
        e.allocations_checked += other.env.allocations_checked;
        e.capacity_violations += other.env.capacity_violations;
        e.intervals_checked += other.env.intervals_checked;
        e.max_energy_residual = e.max_energy_residual.max(other.env.max_energy_residual);
        e.rewards_checked += other.env.rewards_checked;
        e.reward_bound_violations += other.env.reward_bound_violations;
        e.thaw_order_violations += other.env.thaw_order_violations;
        let r = &mut self.replay;
        r.pushed += other.replay.pushed;
        r.thawed += other.replay.thawed;
        r.evicted += other.replay.evicted;
        r.frozen_dropped += other.replay.frozen_dropped;
        r.stale_discarded += other.replay.stale_discarded;
        r.sampled += other.replay.sampled;
        r.frozen_sampled += other.replay.frozen_sampled;
        r.thaw_order_violations += other.replay.thaw_order_violations;
        self.rewards += other.rewards;
        self.reward_bound_violations += other.reward_bound_violations;
        self.stale_steps += other.stale_steps;
    }

    fn absorb_env(&mut self, env: &SliceEnv) {
        self.merge(&RunAudit { env: env.audit().clone(), ..Default::default() });
    }
}

fn tally(audit: &mut RunAudit, rewards: &[MaterializedReward]) {
    audit.rewards += rewards.len() as u64;
    audit.reward_bound_violations += rewards.iter().filter(|m| !(m.reward > 0.0 && m.reward <= 1.0)).count() as u64;
}

/// Runs one greedy episode including the drain phase.
pub fn run_episode(
    env: &mut SliceEnv,
    seed: u64,
    episode: u64,
    mut act: impl FnMut(&Observation, &SliceEnv) -> Result<Vec<f64>>,
    sink: Option<&mut MetricRun>,
) -> Result<EpisodeOutcome> {
    let mut obs = env.reset(seed, episode);
    let mut rewards = Vec::new();
    loop {
        let a = act(&obs, env)?;
        let out = env.step(&a)?;
        rewards.extend(out.materialized);
        obs = out.observation;
        if out.done {
            break;
        }
    }
    let (rest, stale) = env.drain()?;
    rewards.extend(rest);
    let (tasks, mean_delay, mean_energy) = env.task_stats();
    let mean_reward = mean(rewards.iter().map(|m| m.reward));
    if let Some(sink) = sink {
        for t in env.ticks() {
            sink.record_tick(t);
        }
        let mut sorted: Vec<&MaterializedReward> = rewards.iter().collect();
        sorted.sort_by(|a, b| a.materialized_at.total_cmp(&b.materialized_at).then(a.step_id.cmp(&b.step_id)));
        for m in sorted {
            sink.record_reward(episode, m);
        }
    }
    Ok(EpisodeOutcome { episode, mean_reward, rewards, stale_steps: stale.len(), tasks, mean_delay, mean_energy })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut n, mut s) = (0usize, 0.0);
    for x in xs {
        n += 1;
        s += x;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Greedy evaluation of `ctl` over `episodes` episodes of `seed`'s evaluation stream.
pub fn evaluate_controller(
    r: &Resolved,
    ctl: &mut Controller,
    seed: u64,
    episodes: u64,
    mut sink: Option<&mut MetricRun>,
    audit: &mut RunAudit,
) -> Result<Vec<EpisodeOutcome>> {
    let mut env = build_env(r)?;
    let mut out = Vec::with_capacity(episodes as usize);
    for e in 0..episodes {
        let o = run_episode(&mut env, eval_seed(seed), e, |obs, env| ctl.act(obs, env), sink.as_deref_mut())?;
        tally(audit, &o.rewards);
        audit.stale_steps += o.stale_steps as u64;
        out.push(o);
    }
    audit.absorb_env(&env);
    Ok(out)
}

pub fn policy_run(policy: &str, seed: u64, episodes: &[EpisodeOutcome]) -> PolicyRun {
    PolicyRun {
        policy: policy.to_string(),
        seed,
        episode_rewards: episodes.iter().map(|e| e.mean_reward).collect(),
        mean_delay: mean(episodes.iter().map(|e| e.mean_delay)),
        mean_energy: mean(episodes.iter().map(|e| e.mean_energy)),
    }
}

/// Options for one training run.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub episodes: u64,
    pub eval_every: u64,
    pub eval_episodes: u64,
    pub tag: Option<String>,
    /// Appended to as the run progresses.
    pub curve_path: Option<PathBuf>,
}

impl TrainOptions {
    pub fn from_config(r: &Resolved) -> Self {
        let t = &r.config.training;
        Self { episodes: t.episodes, eval_every: t.eval_every, eval_episodes: t.eval_episodes, tag: None, curve_path: None }
    }
}

pub struct Trained<P> {
    pub policy: P,
    pub curve: Vec<CurvePoint>,
    pub audit: RunAudit,
}

struct Curve {
    points: Vec<CurvePoint>,
    writer: Option<CurveWriter>,
    tag: Option<String>,
}

impl Curve {
    fn new(opts: &TrainOptions) -> Result<Self> {
        let writer = opts.curve_path.as_deref().map(CurveWriter::create).transpose()?;
        Ok(Self { points: Vec::new(), writer, tag: opts.tag.clone() })
    }

    fn push(&mut self, episode: u64, kind: CurveKind, mean_reward: f64, rewards: usize) -> Result<()> {
        let p = CurvePoint { episode, kind, mean_reward, rewards, tag: self.tag.clone() };
        if let Some(w) = &mut self.writer {
            w.append(&p)?;
        }
        self.points.push(p);
        Ok(())
    }
}

fn global_step(episode: u64, horizon: usize, step: u64) -> u64 {
    episode * horizon as u64 + step
}

fn due_for_eval(done: u64, opts: &TrainOptions) -> bool {
    opts.eval_episodes > 0 && (done % opts.eval_every == 0 || done == opts.episodes)
}

/// Trains a MADDPG population, starting from `init` if given.
pub fn train_maddpg(r: &Resolved, seed: u64, init: Option<Maddpg>, opts: &TrainOptions) -> Result<Trained<Maddpg>> {
    let mut env = build_env(r)?;
    let cfg = r.config.agent.maddpg.clone();
    let mut pop = match init {
        Some(p) => p,
        None => Maddpg::new(cfg.clone(), env.layout(), env.placements().to_vec(), &mut SeededRng::new(seed, streams::INIT).rng()),
    };
    pop.check_slices_against(&env)?;
    let mut explore = SeededRng::new(seed, streams::EXPLORATION).rng();
    let mut sampler = SeededRng::new(seed, streams::REPLAY).rng();
    let mut buffer = ReplayBuffer::new(pop.cfg.buffer, pop.cfg.frozen_cap);
    let mut curve = Curve::new(opts)?;
    let mut audit = RunAudit::default();
    let horizon = env.config().horizon;
    let mut steps = 0u64;
    let evaluate = |pop: &Maddpg, audit: &mut RunAudit| -> Result<(f64, usize)> {
        let mut ctl = Controller::Maddpg(pop.clone());
        let eps = evaluate_controller(r, &mut ctl, seed, opts.eval_episodes, None, audit)?;
        Ok((mean(eps.iter().map(|e| e.mean_reward)), eps.iter().map(|e| e.rewards.len()).sum()))
    };
    if due_for_eval(0, opts) {
        let (m, n) = evaluate(&pop, &mut audit)?;
        curve.push(0, CurveKind::Eval, m, n)?;
    }
    for ep in 0..opts.episodes {
        pop.set_episode(ep);
        let mut obs = env.reset(seed, ep);
        let mut rewards = Vec::new();
        loop {
            let action = pop.act(&obs.values, true, &mut explore)?;
            let out = env.step(&action)?;
            let clipped: Vec<f64> = action.iter().map(|v| v.clamp(0.0, 1.0)).collect();
            let t = Transition::frozen(
                global_step(ep, horizon, out.step_id),
                obs.values.clone(),
                clipped,
                out.observation.values.clone(),
                out.done,
                env.now(),
            );
            buffer.push_frozen(t).map_err(AgentError::from)?;
            for m in &out.materialized {
                buffer.thaw(global_step(ep, horizon, m.step_id), m.reward, m.materialized_at).map_err(AgentError::from)?;
            }
            rewards.extend(out.materialized);
            obs = out.observation;
            steps += 1;
            let ready = buffer.thawed_len() >= pop.cfg.warmup.max(pop.cfg.batch);
            if ready && steps % pop.cfg.update_every as u64 == 0 {
                let batch = buffer.sample(pop.cfg.batch, &mut sampler).map_err(AgentError::from)?;
                pop.update(&batch)?;
            }
            if out.done {
                break;
            }
        }
        let (rest, stale) = env.drain()?;
        for m in &rest {
            buffer.thaw(global_step(ep, horizon, m.step_id), m.reward, m.materialized_at).map_err(AgentError::from)?;
        }
        for s in &stale {
            buffer.discard_frozen(global_step(ep, horizon, *s)).map_err(AgentError::from)?;
        }
        audit.stale_steps += stale.len() as u64;
        rewards.extend(rest);
        tally(&mut audit, &rewards);
        curve.push(ep + 1, CurveKind::Train, mean(rewards.iter().map(|m| m.reward)), rewards.len())?;
        if due_for_eval(ep + 1, opts) {
            let (m, n) = evaluate(&pop, &mut audit)?;
            curve.push(ep + 1, CurveKind::Eval, m, n)?;
        }
    }
    audit.absorb_env(&env);
    audit.replay = buffer.stats().clone();
    Ok(Trained { policy: pop, curve: curve.points, audit })
}

/// Trains a DQN controller over the joint allocation grid.
pub fn train_dqn(r: &Resolved, seed: u64, opts: &TrainOptions) -> Result<Trained<DqnAgent>> {
    let mut env = build_env(r)?;
    let cfg = r.config.agent.dqn.clone();
    let mut agent = DqnAgent::new(
        cfg.clone(),
        env.layout().global_width(),
        env.placements(),
        &mut SeededRng::new(seed, streams::INIT).rng(),
    );
    let mut explore = SeededRng::new(seed, streams::EXPLORATION).rng();
    let mut sampler = SeededRng::new(seed, streams::REPLAY).rng();
    let mut buffer = ReplayBuffer::new(cfg.buffer, cfg.frozen_cap);
    let mut curve = Curve::new(opts)?;
    let mut audit = RunAudit::default();
    let horizon = env.config().horizon;
    let mut steps = 0u64;
    let evaluate = |agent: &DqnAgent, audit: &mut RunAudit| -> Result<(f64, usize)> {
        let mut ctl = Controller::Dqn(agent.clone());
        let eps = evaluate_controller(r, &mut ctl, seed, opts.eval_episodes, None, audit)?;
        Ok((mean(eps.iter().map(|e| e.mean_reward)), eps.iter().map(|e| e.rewards.len()).sum()))
    };
    if due_for_eval(0, opts) {
        let (m, n) = evaluate(&agent, &mut audit)?;
        curve.push(0, CurveKind::Eval, m, n)?;
    }
    for ep in 0..opts.episodes {
        let mut obs = env.reset(seed, ep);
        let mut rewards = Vec::new();
        loop {
            let idx = agent.act_greedy(&obs.values, cfg.epsilon_at(steps), &mut explore)?;
            let out = env.step(&agent.grid[idx])?;
            let t = Transition::frozen(
                global_step(ep, horizon, out.step_id),
                obs.values.clone(),
                vec![idx as f64],
                out.observation.values.clone(),
                out.done,
                env.now(),
            );
            buffer.push_frozen(t).map_err(AgentError::from)?;
            for m in &out.materialized {
                buffer.thaw(global_step(ep, horizon, m.step_id), m.reward, m.materialized_at).map_err(AgentError::from)?;
            }
            rewards.extend(out.materialized);
            obs = out.observation;
            steps += 1;
            if buffer.thawed_len() >= cfg.warmup.max(cfg.batch) && steps % cfg.update_every as u64 == 0 {
                let batch = buffer.sample(cfg.batch, &mut sampler).map_err(AgentError::from)?;
                agent.update(&batch)?;
            }
            if out.done {
                break;
            }
        }
        let (rest, stale) = env.drain()?;
        for m in &rest {
            buffer.thaw(global_step(ep, horizon, m.step_id), m.reward, m.materialized_at).map_err(AgentError::from)?;
        }
        for s in &stale {
            buffer.discard_frozen(global_step(ep, horizon, *s)).map_err(AgentError::from)?;
        }
        audit.stale_steps += stale.len() as u64;
        rewards.extend(rest);
        tally(&mut audit, &rewards);
        curve.push(ep + 1, CurveKind::Train, mean(rewards.iter().map(|m| m.reward)), rewards.len())?;
        if due_for_eval(ep + 1, opts) {
            let (m, n) = evaluate(&agent, &mut audit)?;
            curve.push(ep + 1, CurveKind::Eval, m, n)?;
        }
    }
    audit.absorb_env(&env);
    audit.replay = buffer.stats().clone();
    Ok(Trained { policy: agent, curve: curve.points, audit })
}

impl Maddpg {
    fn check_slices_against(&self, env: &SliceEnv) -> Result<()> {
        if self.slices() != env.slices() {
            return Err(ExperimentError::ManifestMismatch { checkpoint: self.slices(), config: env.slices() });
        }
        if self.layout != env.layout() || self.placements != env.placements() {
            return Err(ExperimentError::Other("checkpoint layout or placement differs from the config".into()));
        }
        Ok(())
    }
}

/// Best fixed grid allocation for the configured scenario, by enumeration.
/// Returns `(grid index, mean episodic reward)`.
pub fn best_fixed_allocation(r: &Resolved, levels: usize, seed: u64, episodes: u64) -> Result<(usize, f64)> {
    let grid = crate::agents::action_grid(levels, &r.config.env.slices);
    let mut env = build_env(r)?;
    let mut best = (0, f64::NEG_INFINITY);
    for (i, a) in grid.iter().enumerate() {
        let mut total = 0.0;
        for e in 0..episodes {
            total += run_episode(&mut env, eval_seed(seed), e, |_, _| Ok(a.clone()), None)?.mean_reward;
        }
        let m = total / episodes as f64;
        if m > best.1 {
            best = (i, m);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VersionStamp {
    package: String,
    version: String,
    config_schema: u32,
    metrics_schema: u32,
}

/// Writes the reproducibility files every run directory carries.
pub fn write_run_header(dir: &Path, r: &Resolved, seeds: &[u64]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut snapshot = r.config.clone();
    if let WorkloadSource::Trace(records) = &r.workload {
        let file = std::fs::File::create(dir.join("trace.csv"))?;
        workload::write_trace(records, std::io::BufWriter::new(file)).map_err(|e| ExperimentError::Other(e.to_string()))?;
        snapshot.workload.trace = Some(PathBuf::from("trace.csv"));
    }
    std::fs::write(dir.join("config.json"), snapshot.to_json_pretty() + "\n")?;
    std::fs::write(dir.join("seeds.json"), serde_json::to_string(seeds).expect("seeds") + "\n")?;
    let stamp = VersionStamp {
        package: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_schema: crate::config::SCHEMA_VERSION,
        metrics_schema: metrics::SCHEMA_VERSION,
    };
    std::fs::write(dir.join("version.json"), serde_json::to_string_pretty(&stamp).expect("stamp") + "\n")?;
    Ok(())
}

fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

fn metrics_path(dir: &Path, r: &Resolved, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.{}", r.config.output.format.extension()))
}

fn run_parallel<T: Send>(seeds: &[u64], f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = seeds.iter().map(|&s| {
            let f = &f;
            scope.spawn(move || f(s))
        }).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    })
}

#[derive(Debug)]
pub struct TrainSummary {
    pub seeds: Vec<u64>,
    pub curves: Vec<Vec<CurvePoint>>,
    pub audit: RunAudit,
}

/// Trains the configured algorithm for every seed and writes the run directory.
pub fn cmd_train(r: &Resolved, out: &Path, seeds: &[u64], episodes: Option<u64>) -> Result<TrainSummary> {
    write_run_header(out, r, seeds)?;
    let results = run_parallel(seeds, |seed| {
        let dir = seed_dir(out, seed);
        std::fs::create_dir_all(&dir)?;
        let mut opts = TrainOptions::from_config(r);
        if let Some(e) = episodes {
            opts.episodes = e;
        }
        opts.curve_path = Some(dir.join("curve.jsonl"));
        let (curve, audit, mut ctl) = match r.config.agent.algorithm {
            Algorithm::Maddpg => {
                let t = train_maddpg(r, seed, None, &opts)?;
                t.policy.save(&dir.join("checkpoint"))?;
                (t.curve, t.audit, Controller::Maddpg(t.policy))
            }
            Algorithm::Dqn => {
                let t = train_dqn(r, seed, &opts)?;
                std::fs::create_dir_all(dir.join("checkpoint"))?;
                write_json(&dir.join("checkpoint").join("dqn.json"), &t.policy)?;
                (t.curve, t.audit, Controller::Dqn(t.policy))
            }
        };
        let mut run = MetricRun::new();
        let mut audit = audit;
        let n = r.config.training.eval_episodes.max(1);
        evaluate_controller(r, &mut ctl, seed, n, Some(&mut run), &mut audit)?;
        run.export(&metrics_path(&dir, r, "metrics"), r.config.output.format)?;
        Ok((curve, audit))
    })?;
    let mut audit = RunAudit::default();
    let mut curves = Vec::new();
    for (c, a) in results {
        audit.merge(&a);
        curves.push(c);
    }
    Ok(TrainSummary { seeds: seeds.to_vec(), curves, audit })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EpisodeRow {
    policy: String,
    seed: u64,
    episode: u64,
    mean_reward: f64,
    rewards: usize,
    tasks: usize,
    mean_delay: f64,
    mean_energy: f64,
}

fn write_episode_rows(path: &Path, rows: &[EpisodeRow]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).expect("row"));
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Debug)]
pub struct CompareResult {
    pub runs: Vec<PolicyRun>,
    pub table: Vec<SummaryRow>,
    pub audit: RunAudit,
}

/// Evaluates each policy on the same seeds and writes per-policy metrics
/// plus a comparison table. Evaluation exports go to `out` when given.
pub fn cmd_compare(r: &Resolved, policies: &[String], seeds: &[u64], episodes: u64, out: Option<&Path>) -> Result<CompareResult> {
    if let Some(dir) = out {
        write_run_header(dir, r, seeds)?;
    }
    for p in policies {
        Controller::resolve(p, r, 0)?;
    }
    let jobs: Vec<(usize, u64)> = (0..policies.len()).flat_map(|p| seeds.iter().map(move |&s| (p, s))).collect();
    let results = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(p, seed)| {
                scope.spawn(move || -> Result<(String, Vec<EpisodeOutcome>, MetricRun, RunAudit)> {
                    let (name, mut ctl) = Controller::resolve(&policies[p], r, seed)?;
                    let mut run = MetricRun::new();
                    let mut audit = RunAudit::default();
                    let eps = evaluate_controller(r, &mut ctl, seed, episodes, Some(&mut run), &mut audit)?;
                    Ok((name, eps, run, audit))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect::<Result<Vec<_>>>()
    })?;
    let mut runs = Vec::new();
    let mut audit = RunAudit::default();
    let mut rows = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for ((p, seed), (name, eps, run, a)) in jobs.iter().zip(results) {
        let label = unique_label(&mut names, *p, &name);
        audit.merge(&a);
        for e in &eps {
            rows.push(EpisodeRow {
                policy: label.clone(),
                seed: *seed,
                episode: e.episode,
                mean_reward: e.mean_reward,
                rewards: e.rewards.len(),
                tasks: e.tasks,
                mean_delay: e.mean_delay,
                mean_energy: e.mean_energy,
            });
        }
        if let Some(dir) = out {
            run.export(&metrics_path(dir, r, &format!("metrics_{label}_seed{seed}")), r.config.output.format)?;
        }
        runs.push(policy_run(&label, *seed, &eps));
    }
    let table = metrics::summarize(&runs);
    if let Some(dir) = out {
        write_episode_rows(&dir.join("episodes.jsonl"), &rows)?;
        std::fs::write(dir.join("comparison.json"), serde_json::to_string_pretty(&table).expect("table") + "\n")?;
        std::fs::write(dir.join("comparison.txt"), metrics::format_table(&table))?;
    }
    Ok(CompareResult { runs, table, audit })
}

/// Gives the `p`-th policy a stable label, suffixing repeats of the same name.
fn unique_label(names: &mut Vec<String>, p: usize, name: &str) -> String {
    while names.len() <= p {
        let base = name.to_string();
        let taken = names.iter().filter(|n| n.split('#').next() == Some(base.as_str())).count();
        names.push(if taken == 0 { base } else { format!("{base}#{}", taken + 1) });
    }
    names[p].clone()
}

/// Greedy evaluation of a checkpoint.
pub fn cmd_evaluate(r: &Resolved, checkpoint: &Path, seeds: &[u64], episodes: u64, out: Option<&Path>) -> Result<CompareResult> {
    let ctl = Controller::load(checkpoint)?;
    ctl.check_slices(r.config.env.slices.len())?;
    cmd_compare(r, &[checkpoint.display().to_string()], seeds, episodes, out)
}

/// Re-lays out the population in `checkpoint` for the config's slice count,
/// then continues training under the config.
pub fn cmd_transfer(r: &Resolved, checkpoint: &Path, out: &Path, seeds: &[u64], episodes: Option<u64>) -> Result<TrainSummary> {
    let mut old = Maddpg::load(checkpoint)?;
    let manifest = PopulationManifest::load(checkpoint)?;
    // Training hyperparameters come from the new config; layer sizes from the checkpoint.
    old.cfg = MaddpgConfig {
        actor_hidden: old.cfg.actor_hidden.clone(),
        critic_hidden: old.cfg.critic_hidden.clone(),
        ..r.config.agent.maddpg.clone()
    };
    let m = r.config.env.slices.len();
    let placements = r.config.env.slices.clone();
    let init = r.config.agent.transfer_init;
    write_run_header(out, r, seeds)?;
    let results = run_parallel(seeds, |seed| {
        let mut rng = SeededRng::new(seed, streams::INIT).rng();
        let pop = if m > manifest.slices {
            transfer::expand(&old, placements.clone(), init, &mut rng)?
        } else if m < manifest.slices {
            transfer::contract(&old, &(0..m).collect::<Vec<_>>())?
        } else {
            return Err(ExperimentError::ManifestMismatch { checkpoint: manifest.slices, config: m });
        };
        let dir = seed_dir(out, seed);
        std::fs::create_dir_all(&dir)?;
        pop.save(&dir.join("expanded"))?;
        let mut opts = TrainOptions::from_config(r);
        if let Some(e) = episodes {
            opts.episodes = e;
        }
        opts.tag = Some("incremental".into());
        opts.curve_path = Some(dir.join("curve.jsonl"));
        if opts.episodes == 0 {
            return Ok((Vec::new(), RunAudit::default()));
        }
        let t = train_maddpg(r, seed, Some(pop), &opts)?;
        t.policy.save(&dir.join("checkpoint"))?;
        Ok((t.curve, t.audit))
    })?;
    let mut audit = RunAudit::default();
    let mut curves = Vec::new();
    for (c, a) in results {
        audit.merge(&a);
        curves.push(c);
    }
    Ok(TrainSummary { seeds: seeds.to_vec(), curves, audit })
}

/// First curve episode whose evaluation reaches `target`, if any.
pub fn episodes_to_reach(curve: &[CurvePoint], target: f64) -> Option<u64> {
    curve.iter().filter(|p| p.kind == CurveKind::Eval).find(|p| p.mean_reward >= target).map(|p| p.episode)
}

/// Uniformly random raw action, for warm-up style exploration in tests.
pub fn random_action<R: Rng + ?Sized>(slices: usize, rng: &mut R) -> Vec<f64> {
    (0..2 * slices).map(|_| rng.random::<f64>()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn smoke(horizon: usize) -> Resolved {
        let text = format!(
            r#"{{
            "schema_version": 1,
            "topology": {{"nodes": [{{"id": 0}}, {{"id": 1}}, {{"id": 2}}],
                "links": [{{"id": 0, "endpoints": [0, 1]}}, {{"id": 1, "endpoints": [0, 2]}}, {{"id": 2, "endpoints": [1, 2]}}]}},
            "workload": {{"arrival_rate": [0.5]}},
            "env": {{"slices": [{{"node": 0, "link": 0}}, {{"node": 0, "link": 0}}], "horizon": {horizon}}},
            "agent": {{"algorithm": "maddpg", "maddpg": {{"actor_hidden": [8], "critic_hidden": [8], "warmup": 16, "batch": 8}}}},
            "training": {{"episodes": 3, "eval_every": 1, "eval_episodes": 1, "seeds": [1]}}
        }}"#
        );
        ExperimentConfig::from_json(&text).unwrap().resolve(Path::new(".")).unwrap()
    }

    #[test]
    fn maddpg_smoke_training() {
        let r = smoke(20);
        let t = train_maddpg(&r, 1, None, &TrainOptions::from_config(&r)).unwrap();
        let train: Vec<_> = t.curve.iter().filter(|p| p.kind == CurveKind::Train).collect();
        assert_eq!(train.len(), 3);
        assert_eq!(t.curve.iter().filter(|p| p.kind == CurveKind::Eval).count(), 4);
        assert!(train.iter().all(|p| p.rewards == 20));
        assert_eq!(t.audit.reward_bound_violations, 0);
        assert_eq!(t.audit.replay.frozen_sampled, 0);
        assert!(t.audit.replay.sampled > 0);
    }

    #[test]
    fn evaluation_is_reproducible() {
        let r = smoke(30);
        let mut a = Controller::baseline(BaselineKind::Random, &r, 4).unwrap();
        let mut b = Controller::baseline(BaselineKind::Random, &r, 4).unwrap();
        let mut audit = RunAudit::default();
        let x = evaluate_controller(&r, &mut a, 4, 2, None, &mut audit).unwrap();
        let y = evaluate_controller(&r, &mut b, 4, 2, None, &mut audit).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn compare_table_has_a_row_per_policy() {
        let r = smoke(20);
        let policies: Vec<String> = ["random", "full", "static"].iter().map(|s| s.to_string()).collect();
        let res = cmd_compare(&r, &policies, &[1, 2], 2, None).unwrap();
        assert_eq!(res.table.len(), 3);
        assert!(res.table.iter().all(|row| row.seeds == 2 && row.episodes == 4));
        // Full and static coincide when every slice shares one node.
        assert_eq!(res.table[1].mean_reward, res.table[2].mean_reward);
    }

    #[test]
    fn evaluate_rejects_slice_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let r = smoke(10);
        let pop = Maddpg::new(
            r.config.agent.maddpg.clone(),
            crate::env::ObsLayout { slices: 3, nodes: 3, links: 3 },
            vec![crate::env::SlicePlacement { node: 0, link: 0 }; 3],
            &mut SeededRng::new(0, 0).rng(),
        );
        pop.save(dir.path()).unwrap();
        let err = cmd_evaluate(&r, dir.path(), &[1], 1, None).unwrap_err();
        assert!(matches!(err, ExperimentError::ManifestMismatch { checkpoint: 3, config: 2 }));
    }

    #[test]
    fn reach_threshold() {
        let p = |e, k, m| CurvePoint { episode: e, kind: k, mean_reward: m, rewards: 1, tag: None };
        let c = vec![p(0, CurveKind::Eval, 0.2), p(1, CurveKind::Train, 0.9), p(1, CurveKind::Eval, 0.5), p(2, CurveKind::Eval, 0.8)];
        assert_eq!(episodes_to_reach(&c, 0.45), Some(1));
        assert_eq!(episodes_to_reach(&c, 0.95), None);
    }
}
