//! Proportional prioritized experience replay backed by a sum tree.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Binary tree of partial sums over a power-of-two number of leaves.
/// Every internal node is recomputed from its children, never updated
/// by deltas, so drift cannot accumulate.
#[derive(Debug, Clone, PartialEq)]
pub struct SumTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(capacity: usize) -> Self {
        let leaves = capacity.max(1).next_power_of_two();
        SumTree {
            leaves,
            nodes: vec![0.0; 2 * leaves],
        }
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.leaves + i]
    }

    pub fn set(&mut self, i: usize, value: f64) {
        let mut k = self.leaves + i;
        self.nodes[k] = value;
        while k > 1 {
            k /= 2;
            self.nodes[k] = self.nodes[2 * k] + self.nodes[2 * k + 1];
        }
    }

    /// Leaf whose cumulative interval contains `u`, for `0 <= u < total`.
    pub fn find(&self, mut u: f64) -> usize {
        let mut k = 1;
        while k < self.leaves {
            let left = self.nodes[2 * k];
            if u < left || self.nodes[2 * k + 1] <= 0.0 {
                k *= 2;
            } else {
                u -= left;
                k = 2 * k + 1;
            }
        }
        k - self.leaves
    }

    pub fn leaf_sum(&self) -> f64 {
        self.nodes[self.leaves..].iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayConfig {
    pub capacity: usize,
    /// Priority exponent.
    pub alpha: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Added to |TD error| so every item stays samplable.
    pub floor: f64,
    /// Copies stored for each terminal transition.
    pub terminal_copies: usize,
    pub seed: u64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            capacity: 100_000,
            alpha: 0.6,
            beta_start: 0.4,
            beta_end: 1.0,
            floor: 1e-3,
            terminal_copies: 4,
            seed: 0,
        }
    }
}

/// Slot plus the insertion stamp it had when sampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleIndex {
    pub slot: usize,
    pub stamp: u64,
}

#[derive(Debug, Clone)]
pub struct Sample<'a> {
    pub experiences: Vec<&'a Experience>,
    pub indices: Vec<SampleIndex>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PrioritizedBuffer {
    config: ReplayConfig,
    items: Vec<Experience>,
    stamps: Vec<u64>,
    next: usize,
    inserted: u64,
    tree: SumTree,
    max_priority: f64,
    beta: f64,
    rng: ChaCha8Rng,
}

impl PrioritizedBuffer {
    pub fn new(config: ReplayConfig) -> Result<Self> {
        if config.capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        if config.floor <= 0.0 {
            return Err(Error::Config("priority floor must be positive".into()));
        }
        Ok(PrioritizedBuffer {
            tree: SumTree::new(config.capacity),
            items: Vec::with_capacity(config.capacity.min(1 << 16)),
            stamps: Vec::new(),
            next: 0,
            inserted: 0,
            max_priority: 1.0,
            beta: config.beta_start,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
        })
    }

    pub fn config(&self) -> &ReplayConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn set_beta(&mut self, beta: f64) {
        self.beta = beta;
    }

    /// Linear annealing of the importance exponent; `progress` in [0, 1].
    pub fn anneal_beta(&mut self, progress: f64) {
        let p = progress.clamp(0.0, 1.0);
        self.beta = self.config.beta_start + (self.config.beta_end - self.config.beta_start) * p;
    }

    pub fn get(&self, slot: usize) -> &Experience {
        &self.items[slot]
    }

    /// Stored priority (before the exponent) of a slot.
    pub fn priority(&self, slot: usize) -> f64 {
        self.tree.get(slot).powf(1.0 / self.config.alpha)
    }

    pub fn tree(&self) -> &SumTree {
        &self.tree
    }

    /// Insert at `priority`, or at the current maximum when `None`.
    /// Terminal transitions are stored `terminal_copies` times.
    pub fn push(&mut self, exp: Experience, priority: Option<f64>) {
        let copies = if exp.done { self.config.terminal_copies.max(1) } else { 1 };
        let p = priority.map_or(self.max_priority, |p| p.max(self.config.floor));
        self.max_priority = self.max_priority.max(p);
        for _ in 0..copies {
            let slot = self.next;
            self.inserted += 1;
            if slot == self.items.len() {
                self.items.push(exp.clone());
                self.stamps.push(self.inserted);
            } else {
                self.items[slot] = exp.clone();
                self.stamps[slot] = self.inserted;
            }
            self.tree.set(slot, p.powf(self.config.alpha));
            self.next = (self.next + 1) % self.config.capacity;
        }
    }

    /// Sampling probability of every resident slot.
    pub fn probabilities(&self) -> Vec<f64> {
        let total = self.tree.total();
        (0..self.len()).map(|i| self.tree.get(i) / total).collect()
    }

    fn draw(&mut self) -> usize {
        let total = self.tree.total();
        let u = self.rng.random::<f64>() * total;
        let mut slot = self.tree.find(u).min(self.len() - 1);
        while self.tree.get(slot) <= 0.0 && slot > 0 {
            slot -= 1;
        }
        slot
    }

    /// Independent proportional draws with normalized importance weights.
    pub fn sample(&mut self, n: usize) -> Result<Sample<'_>> {
        if self.len() < n || n == 0 {
            return Err(Error::Underfull { have: self.len(), want: n });
        }
        let total = self.tree.total();
        let size = self.len() as f64;
        let mut indices = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            let slot = self.draw();
            indices.push(SampleIndex {
                slot,
                stamp: self.stamps[slot],
            });
            let prob = self.tree.get(slot) / total;
            weights.push((size * prob).powf(-self.beta));
        }
        let max_w = weights.iter().copied().fold(0.0, f64::max);
        for w in &mut weights {
            *w /= max_w;
        }
        let experiences = indices.iter().map(|ix| &self.items[ix.slot]).collect();
        Ok(Sample {
            experiences,
            indices,
            weights,
        })
    }

    /// Set `priority = |td| + floor` for indices still holding the sampled item.
    pub fn update_priorities(&mut self, indices: &[SampleIndex], td_errors: &[f64]) {
        for (ix, td) in indices.iter().zip(td_errors) {
            if ix.slot >= self.len() || self.stamps[ix.slot] != ix.stamp {
                continue;
            }
            let p = td.abs() + self.config.floor;
            self.max_priority = self.max_priority.max(p);
            self.tree.set(ix.slot, p.powf(self.config.alpha));
        }
    }
}
