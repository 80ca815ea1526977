use nalgebra::Vector3;
use rand::Rng;

use super::{AgentError, Result};
use crate::env::{reward, GoalPair, Observation};

/// One environment interaction. `achieved` holds the end-effector positions
/// after the step, which is what hindsight relabeling reads.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    /// Normalized action in `[-1, 1]`.
    pub action: Vec<f64>,
    pub goals: GoalPair,
    pub reward: f64,
    pub cost: f64,
    pub next_obs: Observation,
    pub achieved: [Vector3<f64>; 2],
    pub final_step: bool,
}

/// Fixed-capacity ring buffer with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn extend(&mut self, ts: impl IntoIterator<Item = Transition>) {
        for t in ts {
            self.push(t);
        }
    }

    /// Uniform sample with replacement.
    pub fn sample<'a>(&'a self, n: usize, rng: &mut impl Rng) -> Result<Vec<&'a Transition>> {
        if self.items.is_empty() {
            return Err(AgentError::EmptyBuffer);
        }
        Ok((0..n).map(|_| &self.items[rng.gen_range(0..self.items.len())]).collect())
    }

    pub fn get(&self, i: usize) -> Option<&Transition> {
        self.items.get(i)
    }
}

/// "Final" hindsight relabeling: every transition gets the episode's last
/// achieved end-effector positions as goals and a recomputed reward.
pub fn her_relabel(episode: &[Transition], thresholds: [f64; 2]) -> Result<Vec<Transition>> {
    let last = episode.last().ok_or(AgentError::EmptyEpisode)?;
    let goals = GoalPair(last.achieved);
    Ok(episode
        .iter()
        .map(|t| Transition {
            goals,
            reward: reward(t.achieved, &goals, thresholds),
            ..t.clone()
        })
        .collect())
}
