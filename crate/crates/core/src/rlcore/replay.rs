//! Ring replay buffer with n-step returns that never cross an episode end.

use std::collections::BTreeSet;

use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{contract_err, dim_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    /// Episode ended by reaching a terminal state (no bootstrap).
    pub terminal: bool,
    /// Episode ended for any reason, including the time limit.
    pub done: bool,
    /// Task id or stage index, used to split batches by group.
    pub group: usize,
}

/// Sampled mini-batch with n-step rewards already accumulated.
#[derive(Debug, Clone)]
pub struct Batch {
    pub obs: Tensor,
    pub action: Tensor,
    /// `Σ_{i<m} γⁱ r_{t+i}` where `m ≤ n` is the number of steps taken.
    pub reward: Vec<f64>,
    /// `γᵐ`, or 0 when the walk ended on a terminal transition.
    pub discount: Vec<f64>,
    /// Observation after the last accumulated step.
    pub next_obs: Tensor,
    pub group: Vec<usize>,
    pub index: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.reward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reward.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    obs_dim: usize,
    action_dim: usize,
    n_step: usize,
    gamma: f64,
    obs: Vec<f64>,
    next_obs: Vec<f64>,
    action: Vec<f64>,
    reward: Vec<f64>,
    terminal: Vec<bool>,
    done: Vec<bool>,
    group: Vec<usize>,
    len: usize,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, action_dim: usize, n_step: usize, gamma: f64) -> Result<Self> {
        if capacity == 0 || n_step == 0 {
            return Err(Error::Config("replay capacity and n_step must be positive".into()));
        }
        Ok(Self {
            capacity,
            obs_dim,
            action_dim,
            n_step,
            gamma,
            obs: Vec::new(),
            next_obs: Vec::new(),
            action: Vec::new(),
            reward: Vec::new(),
            terminal: Vec::new(),
            done: Vec::new(),
            group: Vec::new(),
            len: 0,
            head: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.obs.len() != self.obs_dim || t.next_obs.len() != self.obs_dim {
            return dim_err(format!("observation length {} for buffer of {}", t.obs.len(), self.obs_dim));
        }
        if t.action.len() != self.action_dim {
            return dim_err(format!("action length {} for buffer of {}", t.action.len(), self.action_dim));
        }
        if t.action.iter().any(|a| !(a.abs() <= 1.0)) {
            return contract_err("stored action outside [-1, 1]");
        }
        if !t.reward.is_finite() {
            return contract_err("non-finite reward");
        }
        if t.terminal && !t.done {
            return contract_err("terminal transition must also be done");
        }
        if self.len < self.capacity {
            self.obs.extend_from_slice(&t.obs);
            self.next_obs.extend_from_slice(&t.next_obs);
            self.action.extend_from_slice(&t.action);
            self.reward.push(t.reward);
            self.terminal.push(t.terminal);
            self.done.push(t.done);
            self.group.push(t.group);
            self.len += 1;
        } else {
            let i = self.head;
            let (o, a) = (self.obs_dim, self.action_dim);
            self.obs[i * o..(i + 1) * o].copy_from_slice(&t.obs);
            self.next_obs[i * o..(i + 1) * o].copy_from_slice(&t.next_obs);
            self.action[i * a..(i + 1) * a].copy_from_slice(&t.action);
            self.reward[i] = t.reward;
            self.terminal[i] = t.terminal;
            self.done[i] = t.done;
            self.group[i] = t.group;
        }
        self.head = (self.head + 1) % self.capacity;
        Ok(())
    }

    /// `(reward_sum, discount, last_index)` of the n-step walk from slot `i`.
    /// The walk stops after a `done` transition or at the newest entry.
    pub fn n_step_at(&self, i: usize) -> (f64, f64, usize) {
        let newest = (self.head + self.capacity - 1) % self.capacity;
        let (mut sum, mut g, mut j) = (0.0, 1.0, i);
        loop {
            sum += g * self.reward[j];
            g *= self.gamma;
            if self.done[j] || j == newest {
                break;
            }
            let steps = (j + self.capacity - i) % self.capacity + 1;
            if steps >= self.n_step {
                break;
            }
            j = (j + 1) % self.capacity;
        }
        let discount = if self.terminal[j] { 0.0 } else { g };
        (sum, discount, j)
    }

    fn gather(&self, idx: Vec<usize>) -> Result<Batch> {
        let (o, a) = (self.obs_dim, self.action_dim);
        let b = idx.len();
        let mut obs = Vec::with_capacity(b * o);
        let mut next_obs = Vec::with_capacity(b * o);
        let mut action = Vec::with_capacity(b * a);
        let mut reward = Vec::with_capacity(b);
        let mut discount = Vec::with_capacity(b);
        let mut group = Vec::with_capacity(b);
        for &i in &idx {
            let (r, d, last) = self.n_step_at(i);
            obs.extend_from_slice(&self.obs[i * o..(i + 1) * o]);
            next_obs.extend_from_slice(&self.next_obs[last * o..(last + 1) * o]);
            action.extend_from_slice(&self.action[i * a..(i + 1) * a]);
            reward.push(r);
            discount.push(d);
            group.push(self.group[i]);
        }
        Ok(Batch {
            obs: Tensor::new(vec![b, o], obs)?,
            action: Tensor::new(vec![b, a], action)?,
            reward,
            discount,
            next_obs: Tensor::new(vec![b, o], next_obs)?,
            group,
            index: idx,
        })
    }

    /// Uniform sample (with replacement) over stored transitions.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Batch> {
        if self.len == 0 {
            return contract_err("sampling from an empty replay buffer");
        }
        let idx = (0..batch).map(|_| rng.random_range(0..self.len)).collect();
        self.gather(idx)
    }

    /// Uniform sample restricted to one group, or `None` when it has no transitions.
    pub fn sample_group<R: Rng + ?Sized>(&self, group: usize, batch: usize, rng: &mut R) -> Result<Option<Batch>> {
        let pool: Vec<usize> = (0..self.len).filter(|&i| self.group[i] == group).collect();
        if pool.is_empty() {
            return Ok(None);
        }
        let idx = (0..batch).map(|_| pool[rng.random_range(0..pool.len())]).collect();
        self.gather(idx).map(Some)
    }

    /// Number of stored transitions per group label.
    pub fn group_counts(&self) -> Vec<(usize, usize)> {
        let groups: BTreeSet<usize> = self.group.iter().copied().collect();
        groups
            .into_iter()
            .map(|g| (g, self.group.iter().filter(|&&x| x == g).count()))
            .collect()
    }

    /// `n × obs_dim` observations drawn uniformly, for probing activations.
    pub fn sample_obs<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        if self.len == 0 {
            return contract_err("sampling from an empty replay buffer");
        }
        let o = self.obs_dim;
        let mut data = Vec::with_capacity(n * o);
        for _ in 0..n {
            let i = rng.random_range(0..self.len);
            data.extend_from_slice(&self.obs[i * o..(i + 1) * o]);
        }
        Tensor::new(vec![n, o], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(r: f64, terminal: bool, done: bool) -> Transition {
        Transition {
            obs: vec![r],
            action: vec![0.0],
            reward: r,
            next_obs: vec![r + 0.5],
            terminal,
            done,
            group: 0,
        }
    }

    #[test]
    fn three_step_chain_matches_hand_computation() {
        let mut b = ReplayBuffer::new(10, 1, 1, 3, 0.9).unwrap();
        for r in [1.0, 2.0, 3.0, 4.0] {
            b.push(tr(r, false, false)).unwrap();
        }
        let (sum, disc, last) = b.n_step_at(0);
        assert!((sum - (1.0 + 0.9 * 2.0 + 0.81 * 3.0)).abs() < 1e-12);
        assert!((disc - 0.729).abs() < 1e-12);
        assert_eq!(last, 2);
        // The newest entry cuts the walk short.
        let (sum, disc, last) = b.n_step_at(2);
        assert!((sum - (3.0 + 0.9 * 4.0)).abs() < 1e-12);
        assert!((disc - 0.81).abs() < 1e-12);
        assert_eq!(last, 3);
    }

    #[test]
    fn walk_stops_at_episode_end() {
        let mut b = ReplayBuffer::new(10, 1, 1, 3, 0.5).unwrap();
        b.push(tr(1.0, false, false)).unwrap();
        b.push(tr(2.0, true, true)).unwrap();
        b.push(tr(7.0, false, false)).unwrap();
        b.push(tr(8.0, false, true)).unwrap();
        b.push(tr(9.0, false, false)).unwrap();
        assert_eq!(b.n_step_at(0), (2.0, 0.0, 1));
        // A time-limit end still bootstraps.
        assert_eq!(b.n_step_at(2), (7.0 + 0.5 * 8.0, 0.25, 3));
    }

    #[test]
    fn zero_gamma_gives_one_step_reward() {
        let mut b = ReplayBuffer::new(10, 1, 1, 3, 0.0).unwrap();
        for r in [1.0, 2.0, 3.0] {
            b.push(tr(r, false, false)).unwrap();
        }
        let (sum, disc, _) = b.n_step_at(0);
        assert_eq!((sum, disc), (1.0, 0.0));
    }

    #[test]
    fn ring_overwrites_oldest_and_never_walks_past_head() {
        let mut b = ReplayBuffer::new(3, 1, 1, 3, 1.0).unwrap();
        for r in [1.0, 2.0, 3.0, 4.0] {
            b.push(tr(r, false, false)).unwrap();
        }
        assert_eq!(b.len(), 3);
        // Slot 0 now holds 4.0, the newest; slot 1 holds 2.0, the oldest.
        assert_eq!(b.n_step_at(0), (4.0, 1.0, 0));
        assert_eq!(b.n_step_at(1), (2.0 + 3.0 + 4.0, 1.0, 0));
    }

    #[test]
    fn rejects_bad_transitions() {
        let mut b = ReplayBuffer::new(3, 1, 1, 3, 0.9).unwrap();
        let mut t = tr(1.0, false, false);
        t.action = vec![1.5];
        assert!(b.push(t).is_err());
        assert!(b.push(tr(f64::NAN, false, false)).is_err());
        assert!(b.push(tr(1.0, true, false)).is_err());
        assert!(b.sample(2, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn group_sampling_filters() {
        let mut b = ReplayBuffer::new(10, 1, 1, 1, 0.9).unwrap();
        for i in 0..6 {
            let mut t = tr(i as f64, false, false);
            t.group = i % 2;
            b.push(t).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = b.sample_group(1, 20, &mut rng).unwrap().unwrap();
        assert!(s.group.iter().all(|&g| g == 1));
        assert!(b.sample_group(5, 20, &mut rng).unwrap().is_none());
        assert_eq!(b.group_counts(), vec![(0, 3), (1, 3)]);
    }
}
