//! Per-slice actors with centralized critics.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::{local_view, ObsLayout, SlicePlacement, LOCAL_WIDTH};
use crate::nn::{soft_update, Activation, Adam, Mlp, MlpSpec, NnError};
use crate::replay::{ReplayError, Transition};

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("observation width {got}, actor expects {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaddpgConfig {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub gamma: f64,
    pub tau: f64,
    pub batch: usize,
    pub buffer: usize,
    pub frozen_cap: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub sigma_start: f64,
    pub sigma_end: f64,
    /// Episodes over which σ decays linearly from start to end.
    pub sigma_decay_episodes: u64,
    /// Thawed transitions required before the first update.
    pub warmup: usize,
    /// Environment steps between updates.
    pub update_every: usize,
    pub grad_clip: Option<f64>,
    /// Weight of the squared pre-tanh actor output in the actor loss; keeps
    /// the actor out of tanh saturation.
    pub actor_reg: f64,
}

impl Default for MaddpgConfig {
    fn default() -> Self {
        Self {
            actor_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            gamma: 0.95,
            tau: 0.01,
            batch: 64,
            buffer: 50_000,
            frozen_cap: 10_000,
            lr_actor: 1e-4,
            lr_critic: 1e-3,
            sigma_start: 0.3,
            sigma_end: 0.05,
            sigma_decay_episodes: 200,
            warmup: 1_000,
            update_every: 1,
            grad_clip: Some(10.0),
            actor_reg: 1e-3,
        }
    }
}

impl MaddpgConfig {
    pub fn sigma_at(&self, episode: u64) -> f64 {
        if self.sigma_decay_episodes == 0 || episode >= self.sigma_decay_episodes {
            return self.sigma_end;
        }
        let frac = episode as f64 / self.sigma_decay_episodes as f64;
        self.sigma_start + (self.sigma_end - self.sigma_start) * frac
    }
}

pub fn actor_spec(hidden: &[usize]) -> MlpSpec {
    let mut sizes = vec![LOCAL_WIDTH];
    sizes.extend_from_slice(hidden);
    sizes.push(2);
    MlpSpec::new(sizes, Activation::Relu, Activation::Tanh)
}

pub fn critic_spec(layout: &ObsLayout, hidden: &[usize]) -> MlpSpec {
    let mut sizes = vec![layout.global_width() + layout.action_width()];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    MlpSpec::new(sizes, Activation::Relu, Activation::Identity)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentBundle {
    pub slice_id: usize,
    pub actor: Mlp,
    pub critic: Mlp,
    pub target_actor: Mlp,
    pub target_critic: Mlp,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
    pub sigma: f64,
    pub gamma: f64,
    pub tau: f64,
}

impl AgentBundle {
    pub fn new(slice_id: usize, actor: Mlp, critic: Mlp, cfg: &MaddpgConfig) -> Self {
        let mut actor_opt = Adam::new(cfg.lr_actor, actor.params.len());
        let mut critic_opt = Adam::new(cfg.lr_critic, critic.params.len());
        actor_opt.max_grad_norm = cfg.grad_clip;
        critic_opt.max_grad_norm = cfg.grad_clip;
        Self {
            slice_id,
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            critic,
            actor_opt,
            critic_opt,
            sigma: cfg.sigma_start,
            gamma: cfg.gamma,
            tau: cfg.tau,
        }
    }

    /// Deterministic action in [0, 1]^2 from the actor's tanh output.
    pub fn policy(&self, local: &[f64]) -> Result<[f64; 2], AgentError> {
        if local.len() != self.actor.spec.input_width() {
            return Err(AgentError::ShapeMismatch { expected: self.actor.spec.input_width(), got: local.len() });
        }
        let y = self.actor.forward(local)?;
        Ok([(y[0] + 1.0) / 2.0, (y[1] + 1.0) / 2.0])
    }

    /// Policy output plus Gaussian noise of scale σ when exploring. The
    /// result is not clipped; the environment's projection handles that.
    pub fn act<R: Rng + ?Sized>(&self, local: &[f64], explore: bool, rng: &mut R) -> Result<[f64; 2], AgentError> {
        let mut a = self.policy(local)?;
        if explore && self.sigma > 0.0 {
            let noise = Normal::new(0.0, self.sigma).expect("finite sigma");
            for v in &mut a {
                *v += noise.sample(rng);
            }
        }
        Ok(a)
    }

    pub fn reset_optimizers(&mut self) {
        self.actor_opt.reset();
        self.critic_opt.reset();
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub critic_loss: Vec<f64>,
    pub actor_q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Maddpg {
    pub cfg: MaddpgConfig,
    pub layout: ObsLayout,
    pub placements: Vec<SlicePlacement>,
    pub agents: Vec<AgentBundle>,
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

impl Maddpg {
    pub fn new<R: Rng + ?Sized>(
        cfg: MaddpgConfig,
        layout: ObsLayout,
        placements: Vec<SlicePlacement>,
        rng: &mut R,
    ) -> Self {
        assert_eq!(layout.slices, placements.len());
        let agents = (0..layout.slices)
            .map(|i| {
                let actor = Mlp::init(actor_spec(&cfg.actor_hidden), rng, 3e-3);
                let critic = Mlp::init(critic_spec(&layout, &cfg.critic_hidden), rng, 3e-3);
                AgentBundle::new(i, actor, critic, &cfg)
            })
            .collect();
        Self { cfg, layout, placements, agents }
    }

    pub fn slices(&self) -> usize {
        self.agents.len()
    }

    pub fn set_episode(&mut self, episode: u64) {
        let sigma = self.cfg.sigma_at(episode);
        for a in &mut self.agents {
            a.sigma = sigma;
        }
    }

    fn local(&self, global: &[f64], i: usize) -> Vec<f64> {
        local_view(global, &self.layout, i, &self.placements[i])
    }

    /// Interleaved joint action from every agent's local view.
    pub fn act<R: Rng + ?Sized>(&self, global: &[f64], explore: bool, rng: &mut R) -> Result<Vec<f64>, AgentError> {
        if global.len() != self.layout.global_width() {
            return Err(AgentError::ShapeMismatch { expected: self.layout.global_width(), got: global.len() });
        }
        let mut out = Vec::with_capacity(2 * self.slices());
        for (i, agent) in self.agents.iter().enumerate() {
            out.extend(agent.act(&self.local(global, i), explore, rng)?);
        }
        Ok(out)
    }

    fn target_joint(&self, global: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.slices());
        for (i, agent) in self.agents.iter().enumerate() {
            let y = agent.target_actor.forward(&self.local(global, i)).expect("layout checked");
            out.push((y[0] + 1.0) / 2.0);
            out.push((y[1] + 1.0) / 2.0);
        }
        out
    }

    /// TD targets `r + γ(1 - done) Q_i'(s', μ'(s'))` for agent `i`.
    pub fn critic_targets(&self, i: usize, batch: &[&Transition]) -> Result<Vec<f64>, AgentError> {
        let next = self.next_inputs(batch);
        self.targets_from(i, batch, &next)
    }

    /// `[s', mu'(s')]` for every transition; shared by all agents' targets.
    fn next_inputs(&self, batch: &[&Transition]) -> Vec<Vec<f64>> {
        batch.iter().map(|t| concat(&t.next_observation, &self.target_joint(&t.next_observation))).collect()
    }

    fn targets_from(&self, i: usize, batch: &[&Transition], next: &[Vec<f64>]) -> Result<Vec<f64>, AgentError> {
        let agent = &self.agents[i];
        batch
            .iter()
            .zip(next)
            .map(|(t, x)| {
                let r = t.reward()?;
                if t.done || agent.gamma == 0.0 {
                    return Ok(r);
                }
                Ok(r + agent.gamma * agent.target_critic.forward(x)?[0])
            })
            .collect()
    }

    /// Mean squared TD error of agent `i`'s critic on `batch`.
    pub fn critic_loss(&self, i: usize, batch: &[&Transition]) -> Result<f64, AgentError> {
        let ys = self.critic_targets(i, batch)?;
        let mut loss = 0.0;
        for (t, y) in batch.iter().zip(ys) {
            let q = self.agents[i].critic.forward(&concat(&t.observation, &t.action))?[0];
            loss += (q - y) * (q - y);
        }
        Ok(loss / batch.len() as f64)
    }

    pub fn update(&mut self, batch: &[&Transition]) -> Result<UpdateReport, AgentError> {
        if batch.is_empty() {
            return Ok(UpdateReport::default());
        }
        for t in batch {
            t.reward()?;
        }
        let n = batch.len() as f64;
        let s = self.slices();
        let action_off = self.layout.global_width();
        let inputs: Vec<Vec<f64>> = batch.iter().map(|t| concat(&t.observation, &clip01(&t.action))).collect();
        let next = self.next_inputs(batch);
        let mut report = UpdateReport::default();
        for i in 0..s {
            let ys = self.targets_from(i, batch, &next)?;
            let agent = &self.agents[i];
            let mut grad = vec![0.0; agent.critic.params.len()];
            let mut loss = 0.0;
            for (x, y) in inputs.iter().zip(&ys) {
                let tape = agent.critic.forward_tape(x)?;
                let diff = tape.output()[0] - y;
                loss += diff * diff;
                agent.critic.backward(&tape, &[2.0 * diff / n], &mut grad);
            }
            let agent = &mut self.agents[i];
            agent.critic_opt.step(&mut agent.critic.params, &grad);
            report.critic_loss.push(loss / n);

            let agent = &self.agents[i];
            let mut grad = vec![0.0; agent.actor.params.len()];
            let mut q_sum = 0.0;
            for (t, x) in batch.iter().zip(&inputs) {
                let local = local_view(&t.observation, &self.layout, i, &self.placements[i]);
                let atape = agent.actor.forward_tape(&local)?;
                let y = atape.output();
                let mut input = x.clone();
                input[action_off + 2 * i] = (y[0] + 1.0) / 2.0;
                input[action_off + 2 * i + 1] = (y[1] + 1.0) / 2.0;
                let ctape = agent.critic.forward_tape(&input)?;
                q_sum += ctape.output()[0];
                let dq = agent.critic.input_grad(&ctape, &[-1.0 / n]);
                let da = [0.5 * dq[action_off + 2 * i], 0.5 * dq[action_off + 2 * i + 1]];
                let z = atape.pre_output();
                let reg = 2.0 * self.cfg.actor_reg / n;
                agent.actor.backward_with_pre(&atape, &da, &[reg * z[0], reg * z[1]], &mut grad);
            }
            let agent = &mut self.agents[i];
            agent.actor_opt.step(&mut agent.actor.params, &grad);
            report.actor_q.push(q_sum / n);
        }
        for agent in &mut self.agents {
            soft_update(&mut agent.target_critic, &agent.critic, agent.tau);
            soft_update(&mut agent.target_actor, &agent.actor, agent.tau);
        }
        Ok(report)
    }

    pub fn manifest(&self) -> PopulationManifest {
        PopulationManifest {
            format: MANIFEST_FORMAT.into(),
            slices: self.slices(),
            layout: self.layout,
            placements: self.placements.clone(),
            actor_in: LOCAL_WIDTH,
            actor_out: 2,
            critic_in: self.layout.global_width() + self.layout.action_width(),
            critic_out: 1,
            agents: (0..self.slices()).map(|i| format!("agent_{i}.json")).collect(),
            config: self.cfg.clone(),
        }
    }

    /// Writes one file per agent bundle plus `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), AgentError> {
        std::fs::create_dir_all(dir).map_err(NnError::from)?;
        let manifest = self.manifest();
        for (agent, file) in self.agents.iter().zip(&manifest.agents) {
            write_json(&dir.join(file), agent)?;
        }
        write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self, AgentError> {
        let manifest = PopulationManifest::load(dir)?;
        let mut agents = Vec::with_capacity(manifest.slices);
        for file in &manifest.agents {
            let agent: AgentBundle = read_json(&dir.join(file))?;
            agents.push(agent);
        }
        let pop = Self { cfg: manifest.config.clone(), layout: manifest.layout, placements: manifest.placements.clone(), agents };
        pop.check_widths()?;
        Ok(pop)
    }

    /// Verifies every network against the population layout.
    pub fn check_widths(&self) -> Result<(), AgentError> {
        let critic_in = self.layout.global_width() + self.layout.action_width();
        if self.agents.len() != self.layout.slices || self.placements.len() != self.layout.slices {
            return Err(AgentError::Checkpoint("agent count differs from slice count".into()));
        }
        for a in &self.agents {
            for (net, inp, out) in [
                (&a.actor, LOCAL_WIDTH, 2),
                (&a.target_actor, LOCAL_WIDTH, 2),
                (&a.critic, critic_in, 1),
                (&a.target_critic, critic_in, 1),
            ] {
                if net.spec.input_width() != inp || net.spec.output_width() != out {
                    return Err(AgentError::Checkpoint(format!("agent {} has a network of the wrong width", a.slice_id)));
                }
            }
        }
        Ok(())
    }
}

fn clip01(a: &[f64]) -> Vec<f64> {
    a.iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

const MANIFEST_FORMAT: &str = "netslice-population/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationManifest {
    pub format: String,
    pub slices: usize,
    pub layout: ObsLayout,
    pub placements: Vec<SlicePlacement>,
    pub actor_in: usize,
    pub actor_out: usize,
    pub critic_in: usize,
    pub critic_out: usize,
    pub agents: Vec<String>,
    pub config: MaddpgConfig,
}

impl PopulationManifest {
    pub fn load(dir: &Path) -> Result<Self, AgentError> {
        let m: Self = read_json(&dir.join("manifest.json"))?;
        if m.format != MANIFEST_FORMAT {
            return Err(AgentError::Checkpoint(format!("unknown manifest format {:?}", m.format)));
        }
        if m.slices == 0 || m.slices != m.agents.len() || m.slices != m.layout.slices {
            return Err(AgentError::Checkpoint("inconsistent slice counts in manifest".into()));
        }
        if m.critic_in != m.layout.global_width() + m.layout.action_width() || m.actor_in != LOCAL_WIDTH {
            return Err(AgentError::Checkpoint("inconsistent widths in manifest".into()));
        }
        Ok(m)
    }
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), AgentError> {
    let text = serde_json::to_string(value).map_err(|e| AgentError::Checkpoint(e.to_string()))?;
    std::fs::write(path, text).map_err(NnError::from)?;
    Ok(())
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, AgentError> {
    let text = std::fs::read_to_string(path).map_err(NnError::from)?;
    serde_json::from_str(&text).map_err(|e| AgentError::Checkpoint(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SeededRng;

    fn layout(s: usize) -> ObsLayout {
        ObsLayout { slices: s, nodes: 3, links: 3 }
    }

    fn pop(s: usize, cfg: MaddpgConfig, seed: u64) -> Maddpg {
        let placements = vec![SlicePlacement { node: 0, link: 0 }; s];
        Maddpg::new(cfg, layout(s), placements, &mut SeededRng::new(seed, 1).rng())
    }

    fn small() -> MaddpgConfig {
        MaddpgConfig { actor_hidden: vec![16], critic_hidden: vec![16], ..Default::default() }
    }

    fn batch(p: &Maddpg, n: usize, seed: u64) -> Vec<Transition> {
        let mut rng = SeededRng::new(seed, 0).rng();
        let w = p.layout.global_width();
        (0..n as u64)
            .map(|k| {
                let obs: Vec<f64> = (0..w).map(|_| rng.random::<f64>()).collect();
                let next: Vec<f64> = (0..w).map(|_| rng.random::<f64>()).collect();
                let act: Vec<f64> = (0..p.layout.action_width()).map(|_| rng.random::<f64>()).collect();
                let mut t = Transition::frozen(k, obs, act, next, k % 7 == 6, k as f64);
                t.reward = Some(rng.random_range(0.1..1.0));
                t.status = crate::replay::Status::Thawed;
                t
            })
            .collect()
    }

    #[test]
    fn widths() {
        let p = pop(3, small(), 0);
        assert_eq!(p.agents[0].actor.spec.input_width(), 8);
        assert_eq!(p.agents[0].critic.spec.input_width(), 5 * 3 + 3 + 3 + 1 + 6);
        assert_eq!(p.agents[0].target_critic.spec, p.agents[0].critic.spec);
    }

    #[test]
    fn act_is_deterministic_without_noise() {
        let p = pop(2, small(), 0);
        let mut rng = SeededRng::new(0, 2).rng();
        let obs = vec![0.2; p.layout.global_width()];
        assert_eq!(p.act(&obs, false, &mut rng).unwrap(), p.act(&obs, false, &mut rng).unwrap());
        let mut quiet = p.clone();
        quiet.agents.iter_mut().for_each(|a| a.sigma = 0.0);
        assert_eq!(quiet.act(&obs, true, &mut rng).unwrap(), p.act(&obs, false, &mut rng).unwrap());
        assert!(matches!(p.act(&obs[1..], false, &mut rng), Err(AgentError::ShapeMismatch { .. })));
    }

    #[test]
    fn noise_is_centred_on_the_policy() {
        let p = pop(1, small(), 4);
        let local = vec![0.3; LOCAL_WIDTH];
        let det = p.agents[0].policy(&local).unwrap();
        let mut rng = SeededRng::new(4, 2).rng();
        let n = 10_000;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let a = p.agents[0].act(&local, true, &mut rng).unwrap();
            sum[0] += a[0];
            sum[1] += a[1];
        }
        let tol = 4.0 * p.agents[0].sigma / (n as f64).sqrt();
        for k in 0..2 {
            assert!((sum[k] / n as f64 - det[k]).abs() < tol);
        }
    }

    #[test]
    fn gamma_zero_targets_are_rewards() {
        let p = pop(2, MaddpgConfig { gamma: 0.0, ..small() }, 1);
        let data = batch(&p, 10, 1);
        let refs: Vec<&Transition> = data.iter().collect();
        let ys = p.critic_targets(0, &refs).unwrap();
        assert_eq!(ys, data.iter().map(|t| t.reward.unwrap()).collect::<Vec<_>>());
    }

    #[test]
    fn tau_one_syncs_targets() {
        let mut p = pop(2, MaddpgConfig { tau: 1.0, ..small() }, 2);
        let data = batch(&p, 8, 2);
        let refs: Vec<&Transition> = data.iter().collect();
        p.update(&refs).unwrap();
        for a in &p.agents {
            assert_eq!(a.target_actor, a.actor);
            assert_eq!(a.target_critic, a.critic);
        }
    }

    #[test]
    fn frozen_batch_is_rejected() {
        let mut p = pop(1, small(), 3);
        let mut data = batch(&p, 2, 3);
        data[1].reward = None;
        data[1].status = crate::replay::Status::Frozen;
        let refs: Vec<&Transition> = data.iter().collect();
        assert!(matches!(p.update(&refs), Err(AgentError::Replay(ReplayError::FrozenInBatch))));
    }

    #[test]
    fn one_parameter_critic_step() {
        // Critic with a single bias and zero weights: Q = b. With γ = 0 the
        // loss is (b - r)^2, gradient 2(b - r); Adam's first step moves b by
        // lr * sign(gradient).
        let mut p = pop(1, MaddpgConfig { gamma: 0.0, critic_hidden: vec![], ..small() }, 5);
        let c = &mut p.agents[0].critic;
        c.params.iter_mut().for_each(|v| *v = 0.0);
        let b_idx = c.spec.bias_offset(0);
        c.params[b_idx] = 0.2;
        let mut data = batch(&p, 1, 5);
        data[0].reward = Some(0.9);
        let refs: Vec<&Transition> = data.iter().collect();
        let lr = p.cfg.lr_critic;
        p.update(&refs).unwrap();
        let b = p.agents[0].critic.params[b_idx];
        let expected = 0.2 - lr * (2.0 * (0.2 - 0.9)) / ((2.0 * (0.2f64 - 0.9)).abs() + 1e-8);
        assert!((b - expected).abs() < 1e-12, "{b} vs {expected}");
    }

    #[test]
    fn critic_loss_mostly_decreases() {
        let mut p = pop(2, MaddpgConfig { lr_critic: 1e-4, lr_actor: 0.0, tau: 0.0, ..small() }, 6);
        let data = batch(&p, 32, 6);
        let refs: Vec<&Transition> = data.iter().collect();
        let mut losses = vec![p.critic_loss(0, &refs).unwrap()];
        for _ in 0..50 {
            p.update(&refs).unwrap();
            losses.push(p.critic_loss(0, &refs).unwrap());
        }
        let ups = losses.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(ups <= 2, "{ups} increases: {losses:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = pop(3, small(), 7);
        p.save(dir.path()).unwrap();
        let back = Maddpg::load(dir.path()).unwrap();
        assert_eq!(back, p);
        let m = PopulationManifest::load(dir.path()).unwrap();
        assert_eq!((m.slices, m.critic_in), (3, 28));
    }

    #[test]
    fn sigma_schedule() {
        let cfg = MaddpgConfig { sigma_start: 0.4, sigma_end: 0.1, sigma_decay_episodes: 10, ..Default::default() };
        assert_eq!(cfg.sigma_at(0), 0.4);
        assert!((cfg.sigma_at(5) - 0.25).abs() < 1e-12);
        assert_eq!(cfg.sigma_at(50), 0.1);
    }
}
