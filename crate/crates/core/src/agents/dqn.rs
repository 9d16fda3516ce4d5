//! Value-based control over a discretized joint allocation grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::maddpg::AgentError;
use crate::env::{project_action, SlicePlacement};
use crate::nn::{soft_update, Activation, Adam, Mlp, MlpSpec};
use crate::replay::Transition;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DqnConfig {
    pub levels: usize,
    pub hidden: Vec<usize>,
    pub gamma: f64,
    pub lr: f64,
    pub batch: usize,
    pub buffer: usize,
    pub frozen_cap: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    /// Environment steps over which ε decays linearly.
    pub eps_decay_steps: u64,
    pub tau: f64,
    pub warmup: usize,
    pub update_every: usize,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            levels: 5,
            hidden: vec![64, 64],
            gamma: 0.95,
            lr: 1e-3,
            batch: 64,
            buffer: 50_000,
            frozen_cap: 10_000,
            eps_start: 1.0,
            eps_end: 0.05,
            eps_decay_steps: 20_000,
            tau: 0.01,
            warmup: 500,
            update_every: 1,
        }
    }
}

impl DqnConfig {
    pub fn epsilon_at(&self, step: u64) -> f64 {
        if self.eps_decay_steps == 0 || step >= self.eps_decay_steps {
            return self.eps_end;
        }
        self.eps_start + (self.eps_end - self.eps_start) * step as f64 / self.eps_decay_steps as f64
    }
}

/// Every combination of `levels` evenly spaced shares (0 to 1) for each
/// slice's CPU and bandwidth, projected to feasibility. Entries are
/// interleaved per slice like the environment's raw actions.
pub fn action_grid(levels: usize, placements: &[SlicePlacement]) -> Vec<Vec<f64>> {
    assert!(levels >= 2, "grid needs at least two levels");
    let dims = 2 * placements.len();
    let size = levels.pow(dims as u32);
    (0..size)
        .map(|mut idx| {
            let mut raw = vec![0.0; dims];
            for d in (0..dims).rev() {
                raw[d] = (idx % levels) as f64 / (levels - 1) as f64;
                idx /= levels;
            }
            project_action(&raw, placements).flat()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DqnAgent {
    pub cfg: DqnConfig,
    pub q: Mlp,
    pub target: Mlp,
    pub opt: Adam,
    pub grid: Vec<Vec<f64>>,
}

impl DqnAgent {
    pub fn new<R: Rng + ?Sized>(cfg: DqnConfig, obs_width: usize, placements: &[SlicePlacement], rng: &mut R) -> Self {
        let grid = action_grid(cfg.levels, placements);
        let mut sizes = vec![obs_width];
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(grid.len());
        let q = Mlp::init(MlpSpec::new(sizes, Activation::Relu, Activation::Identity), rng, 3e-3);
        let opt = Adam::new(cfg.lr, q.params.len());
        Self { target: q.clone(), q, opt, grid, cfg }
    }

    pub fn q_values(&self, obs: &[f64]) -> Result<Vec<f64>, AgentError> {
        if obs.len() != self.q.spec.input_width() {
            return Err(AgentError::ShapeMismatch { expected: self.q.spec.input_width(), got: obs.len() });
        }
        Ok(self.q.forward(obs)?)
    }

    /// Greedy with probability 1 - ε (ties to the lowest index), uniform otherwise.
    pub fn act_greedy<R: Rng + ?Sized>(&self, obs: &[f64], epsilon: f64, rng: &mut R) -> Result<usize, AgentError> {
        assert!((0.0..=1.0).contains(&epsilon), "epsilon out of range");
        if epsilon > 0.0 && rng.random::<f64>() < epsilon {
            return Ok(rng.random_range(0..self.grid.len()));
        }
        Ok(argmax(&self.q_values(obs)?))
    }

    pub fn td_targets(&self, batch: &[&Transition]) -> Result<Vec<f64>, AgentError> {
        batch
            .iter()
            .map(|t| {
                let r = t.reward()?;
                if t.done || self.cfg.gamma == 0.0 {
                    return Ok(r);
                }
                let next = self.target.forward(&t.next_observation)?;
                Ok(r + self.cfg.gamma * next.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            })
            .collect()
    }

    /// One squared-error step. Each transition's action holds the grid index
    /// as its single component.
    pub fn update(&mut self, batch: &[&Transition]) -> Result<f64, AgentError> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let ys = self.td_targets(batch)?;
        let n = batch.len() as f64;
        let mut grad = vec![0.0; self.q.params.len()];
        let mut loss = 0.0;
        let mut g_out = vec![0.0; self.grid.len()];
        for (t, y) in batch.iter().zip(ys) {
            let a = t.action[0] as usize;
            let tape = self.q.forward_tape(&t.observation)?;
            let diff = tape.output()[a] - y;
            loss += diff * diff;
            g_out.iter_mut().for_each(|g| *g = 0.0);
            g_out[a] = 2.0 * diff / n;
            self.q.backward(&tape, &g_out, &mut grad);
        }
        self.opt.step(&mut self.q.params, &grad);
        soft_update(&mut self.target, &self.q, self.cfg.tau);
        Ok(loss / n)
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpaceReport {
    pub slices: usize,
    pub levels: usize,
    /// `levels^(2 * slices)`; `None` when it overflows 128 bits.
    pub dqn_joint_actions: Option<u128>,
    pub maddpg_action_dims: usize,
}

pub fn action_space_report(slices: usize, levels: usize) -> ActionSpaceReport {
    assert!(slices >= 1 && levels >= 1, "counts must be positive");
    let dqn = u32::try_from(2 * slices).ok().and_then(|e| (levels as u128).checked_pow(e));
    ActionSpaceReport { slices, levels, dqn_joint_actions: dqn, maddpg_action_dims: 2 * slices }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replay::Status;
    use crate::sim::SeededRng;

    fn shared(n: usize) -> Vec<SlicePlacement> {
        vec![SlicePlacement { node: 0, link: 0 }; n]
    }

    fn thawed(obs: Vec<f64>, a: usize, r: f64, next: Vec<f64>, done: bool) -> Transition {
        let mut t = Transition::frozen(0, obs, vec![a as f64], next, done, 0.0);
        t.reward = Some(r);
        t.status = Status::Thawed;
        t
    }

    #[test]
    fn report_counts() {
        assert_eq!(action_space_report(2, 5).dqn_joint_actions, Some(625));
        assert_eq!(action_space_report(3, 10).dqn_joint_actions, Some(1_000_000));
        assert_eq!(action_space_report(7, 3).maddpg_action_dims, 14);
        assert_eq!(action_space_report(100, 10).dqn_joint_actions, None);
    }

    #[test]
    fn grid_is_feasible() {
        let grid = action_grid(5, &shared(2));
        assert_eq!(grid.len(), 625);
        for g in &grid {
            assert!(g[0] + g[2] <= 1.0 + 1e-12 && g[1] + g[3] <= 1.0 + 1e-12);
        }
        assert_eq!(grid[0], vec![0.0; 4]);
        assert_eq!(grid[624], vec![0.5; 4]);
    }

    #[test]
    fn greedy_ties_and_scaling() {
        let mut rng = SeededRng::new(0, 0).rng();
        let mut agent = DqnAgent::new(DqnConfig { levels: 2, hidden: vec![], ..Default::default() }, 3, &shared(1), &mut rng);
        agent.q.params.iter_mut().for_each(|p| *p = 0.0);
        assert_eq!(agent.act_greedy(&[1.0, 2.0, 3.0], 0.0, &mut rng).unwrap(), 0);
        let b = agent.q.spec.bias_offset(0);
        agent.q.params[b + 2] = 0.5;
        agent.q.params[b + 3] = 0.5;
        assert_eq!(agent.act_greedy(&[1.0, 2.0, 3.0], 0.0, &mut rng).unwrap(), 2);
        // Positive rescaling of the outputs keeps the argmax.
        let before: Vec<usize> = (0..20).map(|k| argmax(&agent.q_values(&[k as f64, 1.0, -1.0]).unwrap())).collect();
        let last = agent.q.spec.layers() - 1;
        let (w0, end) = (agent.q.spec.weight_offset(last), agent.q.spec.param_count());
        agent.q.params[w0..end].iter_mut().for_each(|p| *p *= 3.5);
        let after: Vec<usize> = (0..20).map(|k| argmax(&agent.q_values(&[k as f64, 1.0, -1.0]).unwrap())).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn epsilon_one_is_uniform() {
        let mut rng = SeededRng::new(1, 0).rng();
        let agent = DqnAgent::new(DqnConfig { levels: 2, hidden: vec![4], ..Default::default() }, 2, &shared(2), &mut rng);
        let k = agent.grid.len();
        let mut counts = vec![0u64; k];
        let draws = 100_000;
        for _ in 0..draws {
            counts[agent.act_greedy(&[0.0, 0.0], 1.0, &mut rng).unwrap()] += 1;
        }
        let e = draws as f64 / k as f64;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        let df = (k - 1) as f64;
        assert!(chi2 < df + 3.0 * (2.0 * df).sqrt(), "chi2 {chi2}");
    }

    #[test]
    fn targets_without_bootstrap() {
        let mut rng = SeededRng::new(2, 0).rng();
        let agent = DqnAgent::new(DqnConfig { gamma: 0.9, levels: 2, ..Default::default() }, 2, &shared(1), &mut rng);
        let t = thawed(vec![0.0, 1.0], 1, 0.4, vec![1.0, 0.0], true);
        assert_eq!(agent.td_targets(&[&t]).unwrap(), vec![0.4]);
        let zero = DqnAgent::new(DqnConfig { gamma: 0.0, levels: 2, ..Default::default() }, 2, &shared(1), &mut rng);
        let t = thawed(vec![0.0, 1.0], 1, 0.7, vec![1.0, 0.0], false);
        assert_eq!(zero.td_targets(&[&t]).unwrap(), vec![0.7]);
    }

    /// One-hot states on a 3-state chain; action 0 stays, any other action
    /// moves right; reward 1 only when entering the last state, which is
    /// terminal. Value iteration gives the exact Q table.
    #[test]
    fn tabular_chain_matches_value_iteration() {
        let gamma = 0.9;
        let mut rng = SeededRng::new(3, 0).rng();
        let cfg = DqnConfig { levels: 2, hidden: vec![], gamma, lr: 0.05, tau: 1.0, ..Default::default() };
        let mut agent = DqnAgent::new(cfg, 3, &shared(1), &mut rng);
        let k = agent.grid.len();
        let one_hot = |s: usize| (0..3).map(|i| if i == s { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        let step = |s: usize, a: usize| -> (usize, f64, bool) {
            let next = if a == 0 { s } else { s + 1 };
            if next == 2 {
                (2, 1.0, true)
            } else {
                (next, 0.0, false)
            }
        };
        // Value iteration oracle over the two non-terminal states.
        let mut qv = vec![vec![0.0; k]; 2];
        for _ in 0..500 {
            let v: Vec<f64> = qv.iter().map(|q| q.iter().copied().fold(f64::MIN, f64::max)).collect();
            for s in 0..2 {
                for a in 0..k {
                    let (n, r, done) = step(s, a);
                    qv[s][a] = r + if done { 0.0 } else { gamma * v[n] };
                }
            }
        }
        let data: Vec<Transition> = (0..2)
            .flat_map(|s| (0..k).map(move |a| (s, a)))
            .map(|(s, a)| {
                let (n, r, done) = step(s, a);
                thawed(one_hot(s), a, r, one_hot(n), done)
            })
            .collect();
        let refs: Vec<&Transition> = data.iter().collect();
        for _ in 0..4000 {
            agent.update(&refs).unwrap();
        }
        for s in 0..2 {
            let q = agent.q_values(&one_hot(s)).unwrap();
            for a in 0..k {
                assert!((q[a] - qv[s][a]).abs() < 1e-3, "Q({s},{a}) = {} vs {}", q[a], qv[s][a]);
            }
        }
    }
}
