//! Supervised noise-prediction training.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{output_slope, output_to_eps, q_sample_with, Dataset, NoiseSchedule};
use crate::nncore::{backward_batch, forward_batch, opt_step, AdamW, Cond, DenoiserParams, OptState, Query};
use crate::rng::{self, tag};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub steps: usize,
    pub batch: usize,
    /// Probability of replacing the prompt with the null embedding.
    pub drop_prob: f64,
    pub seed: u64,
    pub opt: AdamW,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self { steps: 3000, batch: 16, drop_prob: 0.1, seed: 0, opt: AdamW::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SftReport {
    /// Mean squared noise error per step.
    pub losses: Vec<f64>,
}

impl SftReport {
    /// Mean loss over `window` steps starting at `start`.
    pub fn window_mean(&self, start: usize, window: usize) -> f64 {
        let s = &self.losses[start..(start + window).min(self.losses.len())];
        s.iter().sum::<f64>() / s.len() as f64
    }
}

pub fn sft_train(
    mut params: DenoiserParams,
    data: &Dataset,
    schedule: &NoiseSchedule,
    cfg: &SftConfig,
) -> Result<(DenoiserParams, SftReport)> {
    if data.items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(0.0..1.0).contains(&cfg.drop_prob) || cfg.batch == 0 {
        return Err(Error::InvalidConfig(format!("drop_prob {} / batch {}", cfg.drop_prob, cfg.batch)));
    }
    let d = params.arch().d;
    if let Some((p, _)) = data.items.iter().find(|(_, x)| x.len() != d) {
        return Err(Error::DimensionMismatch(format!("tile of prompt {} does not match the model", p.0)));
    }
    let mut opt = OptState::new(cfg.opt, params.len());
    let mut r = rng::stream(&[tag::SFT, cfg.seed]);
    let mut report = SftReport::default();
    let mut grad = vec![0.0; params.len()];
    for _ in 0..cfg.steps {
        let mut noisy = Vec::with_capacity(cfg.batch);
        let mut targets = Vec::with_capacity(cfg.batch * d);
        let mut meta = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let (prompt, x0) = &data.items[r.random_range(0..data.items.len())];
            let t = r.random_range(0..schedule.t_train);
            let eps: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
            let cond = if r.random::<f64>() < cfg.drop_prob { Cond::Null } else { Cond::Prompt(*prompt) };
            noisy.push(q_sample_with(x0, schedule.alpha_bars[t], &eps));
            targets.extend_from_slice(&eps);
            meta.push((t, cond));
        }
        let qs: Vec<Query> = noisy.iter().zip(&meta).map(|(x, &(t, cond))| Query { x, t, cond }).collect();
        let acts = forward_batch(&params, &qs)?;
        let scale = 1.0 / (cfg.batch * d) as f64;
        let mut eps_hat = acts.output().to_vec();
        for ((row, x), &(t, _)) in eps_hat.chunks_mut(d).zip(&noisy).zip(&meta) {
            output_to_eps(row, x, schedule.alpha_bars[t]);
        }
        let diff: Vec<f64> = eps_hat.iter().zip(&targets).map(|(y, e)| y - e).collect();
        report.losses.push(diff.iter().map(|v| v * v).sum::<f64>() * scale);
        let mut up = Vec::with_capacity(diff.len());
        for (row, &(t, _)) in diff.chunks(d).zip(&meta) {
            let slope = 2.0 * scale * output_slope(schedule.alpha_bars[t]);
            up.extend(row.iter().map(|v| slope * v));
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        backward_batch(&params, &acts, &up, &mut grad)?;
        opt_step(&mut params, &grad, &mut opt)?;
    }
    Ok((params, report))
}
