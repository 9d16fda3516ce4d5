//! Replay memory with delayed rewards.
//!
//! A transition enters frozen, without a reward, and only becomes
//! sampleable once [`ReplayBuffer::thaw`] attaches its reward. The thawed
//! ring is ordered by thaw time and evicts oldest first; frozen entries are
//! never evicted by the ring's capacity.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReplayError {
    #[error("step {0} already stored")]
    DuplicateStep(u64),
    #[error("no frozen transition for step {0}")]
    UnknownHandle(u64),
    #[error("step {0} already thawed")]
    AlreadyThawed(u64),
    #[error("requested {requested} transitions, only {available} thawed")]
    InsufficientThawed { requested: usize, available: usize },
    #[error("frozen transition in training batch")]
    FrozenInBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    Frozen,
    Thawed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub step_id: u64,
    pub observation: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: Option<f64>,
    pub next_observation: Vec<f64>,
    pub done: bool,
    pub status: Status,
    /// Simulated time at the end of the step.
    pub created_at: f64,
    pub thawed_at: Option<f64>,
}

impl Transition {
    pub fn frozen(step_id: u64, observation: Vec<f64>, action: Vec<f64>, next_observation: Vec<f64>, done: bool, created_at: f64) -> Self {
        Self {
            step_id,
            observation,
            action,
            reward: None,
            next_observation,
            done,
            status: Status::Frozen,
            created_at,
            thawed_at: None,
        }
    }

    /// Reward of a thawed transition.
    pub fn reward(&self) -> Result<f64, ReplayError> {
        match (self.status, self.reward) {
            (Status::Thawed, Some(r)) => Ok(r),
            _ => Err(ReplayError::FrozenInBatch),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayStats {
    pub pushed: u64,
    pub thawed: u64,
    pub evicted: u64,
    /// Frozen entries dropped because the frozen cap was reached.
    pub frozen_dropped: u64,
    /// Frozen entries discarded because their reward never arrived.
    pub stale_discarded: u64,
    pub sampled: u64,
    pub frozen_sampled: u64,
    /// Thaws whose timestamp preceded the transition's creation.
    pub thaw_order_violations: u64,
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    frozen_cap: usize,
    thawed: VecDeque<Transition>,
    frozen: BTreeMap<u64, Transition>,
    known: BTreeMap<u64, Status>,
    stats: ReplayStats,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, frozen_cap: usize) -> Self {
        assert!(capacity > 0 && frozen_cap > 0, "replay capacities must be positive");
        Self {
            capacity,
            frozen_cap,
            thawed: VecDeque::with_capacity(capacity.min(1 << 16)),
            frozen: BTreeMap::new(),
            known: BTreeMap::new(),
            stats: ReplayStats::default(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn thawed_len(&self) -> usize {
        self.thawed.len()
    }

    pub fn frozen_len(&self) -> usize {
        self.frozen.len()
    }

    pub fn stats(&self) -> &ReplayStats {
        &self.stats
    }

    pub fn push_frozen(&mut self, mut t: Transition) -> Result<u64, ReplayError> {
        let id = t.step_id;
        if self.known.contains_key(&id) {
            return Err(ReplayError::DuplicateStep(id));
        }
        t.reward = None;
        t.status = Status::Frozen;
        t.thawed_at = None;
        if self.frozen.len() >= self.frozen_cap {
            let (&oldest, _) = self.frozen.iter().next().unwrap();
            self.frozen.remove(&oldest);
            self.stats.frozen_dropped += 1;
        }
        self.frozen.insert(id, t);
        self.known.insert(id, Status::Frozen);
        self.stats.pushed += 1;
        Ok(id)
    }

    pub fn thaw(&mut self, handle: u64, reward: f64, at: f64) -> Result<(), ReplayError> {
        let Some(mut t) = self.frozen.remove(&handle) else {
            return match self.known.get(&handle) {
                Some(Status::Thawed) => Err(ReplayError::AlreadyThawed(handle)),
                _ => Err(ReplayError::UnknownHandle(handle)),
            };
        };
        if at < t.created_at {
            self.stats.thaw_order_violations += 1;
        }
        t.reward = Some(reward);
        t.status = Status::Thawed;
        t.thawed_at = Some(at);
        self.known.insert(handle, Status::Thawed);
        if self.thawed.len() == self.capacity {
            self.thawed.pop_front();
            self.stats.evicted += 1;
        }
        self.thawed.push_back(t);
        self.stats.thawed += 1;
        Ok(())
    }

    /// Drops a frozen entry whose reward will never arrive.
    pub fn discard_frozen(&mut self, handle: u64) -> Result<(), ReplayError> {
        self.frozen.remove(&handle).ok_or(ReplayError::UnknownHandle(handle))?;
        self.stats.stale_discarded += 1;
        Ok(())
    }

    /// Frozen entries created more than `horizon` steps before `current_step`.
    pub fn stale_frozen(&self, current_step: u64, horizon: u64) -> usize {
        self.frozen.keys().take_while(|&&id| id + horizon < current_step).count()
    }

    /// Uniform sample without replacement from the thawed store.
    pub fn sample<R: Rng + ?Sized>(&mut self, batch: usize, rng: &mut R) -> Result<Vec<&Transition>, ReplayError> {
        if batch > self.thawed.len() || batch == 0 {
            return Err(ReplayError::InsufficientThawed { requested: batch, available: self.thawed.len() });
        }
        let picks = rand::seq::index::sample(rng, self.thawed.len(), batch);
        let out: Vec<&Transition> = picks.iter().map(|i| &self.thawed[i]).collect();
        let frozen = out.iter().filter(|t| t.status != Status::Thawed || t.reward.is_none()).count();
        assert_eq!(frozen, 0, "frozen transition reached the thawed store");
        self.stats.frozen_sampled += frozen as u64;
        self.stats.sampled += batch as u64;
        Ok(out)
    }

    pub fn iter_thawed(&self) -> impl Iterator<Item = &Transition> {
        self.thawed.iter()
    }

    /// One JSON line per stored transition: frozen entries first, then the
    /// thawed ring in thaw order.
    pub fn dump<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Row {
            step_id: u64,
            status: Status,
            created_at: f64,
            thawed_at: Option<f64>,
            reward: Option<f64>,
        }
        for t in self.frozen.values().chain(self.thawed.iter()) {
            let row = Row {
                step_id: t.step_id,
                status: t.status,
                created_at: t.created_at,
                thawed_at: t.thawed_at,
                reward: t.reward,
            };
            serde_json::to_writer(&mut out, &row)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
