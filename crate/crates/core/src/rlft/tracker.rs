//! Per-prompt sliding-window statistics for advantage normalization.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::sceneworld::PromptId;

/// Population floor applied to the standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Normalized advantages are clipped to `[-ADV_CLIP, ADV_CLIP]`.
pub const ADV_CLIP: f64 = 5.0;

/// Ring buffer of the last `capacity` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    capacity: usize,
    values: VecDeque<f64>,
}

impl Window {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), values: VecDeque::new() }
    }

    pub fn push(&mut self, v: f64) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(v);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.values.iter()
    }

    /// Mean and floored population std, recomputed from the contents.
    pub fn stats(&self) -> (f64, f64) {
        mean_std(self.values.iter().copied())
    }
}

/// Mean and floored population standard deviation.
pub fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, SIGMA_FLOOR);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt().max(SIGMA_FLOOR))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Quantity {
    Reward,
    Kl,
}

/// Reward and KL windows per prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerPromptStats {
    pub window: usize,
    /// Below this many buffered values the batch-global statistics are used.
    pub min_count: usize,
    rewards: BTreeMap<u64, Window>,
    kls: BTreeMap<u64, Window>,
}

impl PerPromptStats {
    pub fn new(window: usize, min_count: usize) -> Self {
        Self { window, min_count, rewards: BTreeMap::new(), kls: BTreeMap::new() }
    }

    pub fn buffer(&self, q: Quantity, prompt: PromptId) -> Option<&Window> {
        self.map(q).get(&prompt.0)
    }

    fn map(&self, q: Quantity) -> &BTreeMap<u64, Window> {
        match q {
            Quantity::Reward => &self.rewards,
            Quantity::Kl => &self.kls,
        }
    }

    fn map_mut(&mut self, q: Quantity) -> &mut BTreeMap<u64, Window> {
        match q {
            Quantity::Reward => &mut self.rewards,
            Quantity::Kl => &mut self.kls,
        }
    }

    /// Pushes the batch into the per-prompt windows (in sample order), then
    /// normalizes each value by its prompt's window, or by the whole batch
    /// while that window is still shorter than `min_count`. Clipped.
    pub fn normalize(&mut self, q: Quantity, prompts: &[PromptId], values: &[f64]) -> Vec<f64> {
        assert_eq!(prompts.len(), values.len(), "one prompt per value");
        let cap = self.window;
        for (p, &v) in prompts.iter().zip(values) {
            self.map_mut(q).entry(p.0).or_insert_with(|| Window::new(cap)).push(v);
        }
        let global = mean_std(values.iter().copied());
        let map = self.map(q);
        prompts
            .iter()
            .zip(values)
            .map(|(p, &v)| {
                let w = &map[&p.0];
                let (mu, sd) = if w.len() < self.min_count { global } else { w.stats() };
                ((v - mu) / sd).clamp(-ADV_CLIP, ADV_CLIP)
            })
            .collect()
    }
}

/// Normalizes `values` against one buffer after pushing them into it.
pub fn normalize_advantage(values: &[f64], buffer: &mut Window) -> Vec<f64> {
    for &v in values {
        buffer.push(v);
    }
    let (mu, sd) = buffer.stats();
    values.iter().map(|v| ((v - mu) / sd).clamp(-ADV_CLIP, ADV_CLIP)).collect()
}
