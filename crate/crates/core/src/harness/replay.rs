//! Fixed-capacity ring buffer of transitions with uniform sampling.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, CoxqError, Result};
use crate::learner::Batch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
    pub next_state: Vec<f64>,
    pub terminated: bool,
    pub truncated: bool,
    pub step_index: u64,
}

/// Flat row-major storage; slot `i` of every column belongs to the same transition.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    act_dim: usize,
    pub(crate) obs: Vec<f64>,
    pub(crate) actions: Vec<f64>,
    pub(crate) rewards: Vec<f64>,
    pub(crate) costs: Vec<f64>,
    pub(crate) next_obs: Vec<f64>,
    pub(crate) flags: Vec<u8>,
    pub(crate) step_index: Vec<u64>,
    /// Next slot to overwrite.
    pub(crate) cursor: usize,
    pub(crate) inserted: u64,
    pub rng: ChaCha8Rng,
}

const TERMINATED: u8 = 1;
const TRUNCATED: u8 = 2;

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, act_dim: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(CoxqError::invalid("replay capacity must be >= 1"));
        }
        Ok(Self {
            capacity,
            obs_dim,
            act_dim,
            obs: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            costs: Vec::new(),
            next_obs: Vec::new(),
            flags: Vec::new(),
            step_index: Vec::new(),
            cursor: 0,
            inserted: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_inserted(&self) -> u64 {
        self.inserted
    }

    pub fn push(&mut self, t: &Transition) -> Result<()> {
        check_len(self.obs_dim, t.state.len())?;
        check_len(self.obs_dim, t.next_state.len())?;
        check_len(self.act_dim, t.action.len())?;
        let finite = t
            .state
            .iter()
            .chain(&t.action)
            .chain(&t.next_state)
            .chain([&t.reward, &t.cost])
            .all(|v| v.is_finite());
        if !finite {
            return Err(CoxqError::NumericDivergence("non-finite transition".into()));
        }
        if t.cost < 0.0 {
            return Err(CoxqError::invalid("transition cost must be >= 0"));
        }
        let flags = u8::from(t.terminated) * TERMINATED | u8::from(t.truncated) * TRUNCATED;
        if self.len() < self.capacity {
            self.obs.extend_from_slice(&t.state);
            self.actions.extend_from_slice(&t.action);
            self.rewards.push(t.reward);
            self.costs.push(t.cost);
            self.next_obs.extend_from_slice(&t.next_state);
            self.flags.push(flags);
            self.step_index.push(t.step_index);
        } else {
            let i = self.cursor;
            let (o, a) = (self.obs_dim, self.act_dim);
            self.obs[i * o..(i + 1) * o].copy_from_slice(&t.state);
            self.actions[i * a..(i + 1) * a].copy_from_slice(&t.action);
            self.rewards[i] = t.reward;
            self.costs[i] = t.cost;
            self.next_obs[i * o..(i + 1) * o].copy_from_slice(&t.next_state);
            self.flags[i] = flags;
            self.step_index[i] = t.step_index;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        self.inserted += 1;
        Ok(())
    }

    pub fn get(&self, slot: usize) -> Option<Transition> {
        if slot >= self.len() {
            return None;
        }
        let (o, a) = (self.obs_dim, self.act_dim);
        Some(Transition {
            state: self.obs[slot * o..(slot + 1) * o].to_vec(),
            action: self.actions[slot * a..(slot + 1) * a].to_vec(),
            reward: self.rewards[slot],
            cost: self.costs[slot],
            next_state: self.next_obs[slot * o..(slot + 1) * o].to_vec(),
            terminated: self.flags[slot] & TERMINATED != 0,
            truncated: self.flags[slot] & TRUNCATED != 0,
            step_index: self.step_index[slot],
        })
    }

    /// Uniform slot indices, with replacement.
    pub fn sample_indices(&mut self, n: usize) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(CoxqError::invalid("cannot sample from an empty buffer"));
        }
        let len = self.len();
        Ok((0..n).map(|_| self.rng.random_range(0..len)).collect())
    }

    pub fn sample(&mut self, n: usize) -> Result<Batch> {
        let idx = self.sample_indices(n)?;
        Ok(self.gather(&idx))
    }

    pub fn gather(&self, idx: &[usize]) -> Batch {
        let (o, a) = (self.obs_dim, self.act_dim);
        let rows = |src: &[f64], width: usize| {
            let mut flat = Vec::with_capacity(idx.len() * width);
            for &i in idx {
                flat.extend_from_slice(&src[i * width..(i + 1) * width]);
            }
            Array2::from_shape_vec((idx.len(), width), flat).expect("consistent widths")
        };
        Batch {
            obs: rows(&self.obs, o),
            actions: rows(&self.actions, a),
            rewards: idx.iter().map(|&i| self.rewards[i]).collect(),
            costs: idx.iter().map(|&i| self.costs[i]).collect(),
            next_obs: rows(&self.next_obs, o),
            terminated: idx.iter().map(|&i| self.flags[i] & TERMINATED != 0).collect(),
        }
    }

    /// The last `min(w, len)` insertions, newest first.
    pub fn recent(&self, w: usize) -> Vec<Transition> {
        let n = w.min(self.len());
        (1..=n)
            .map(|k| {
                let slot = (self.cursor + self.capacity - k) % self.capacity;
                self.get(slot).expect("slot holds a transition")
            })
            .collect()
    }
}
