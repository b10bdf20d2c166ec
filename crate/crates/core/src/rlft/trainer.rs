use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{step_term, Estimator, PerPromptStats, Quantity};
use crate::diffusion::{decode_sample, policy_backward, policy_forward, sample_finals, sample_trajectories, NoiseSchedule, StepRef, Trajectory};
use crate::mrc::{mrc_reward, MrcConfig, World};
use crate::nncore::{opt_step, AdamW, DenoiserParams, FrozenDenoiser, OptState};
use crate::rng::{self, hash_keys, tag};
use crate::sceneworld::{untile, PromptId};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub alpha: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub sample_minibatch: usize,
    pub train_minibatch: usize,
    pub epochs_max: usize,
    pub kl_stop_threshold: f64,
    pub estimator: Estimator,
    pub is_clip_range: f64,
    pub is_inner_steps: usize,
    pub window: usize,
    /// Defaults to twice the expected samples per prompt per batch.
    pub min_count: Option<usize>,
    pub cfg_scale: f64,
    pub seed: u64,
    pub opt: AdamW,
    /// Log wall time; off keeps logs bit-reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.2,
            batch_size: 64,
            sample_minibatch: 8,
            train_minibatch: 4,
            epochs_max: 40,
            // toy calibration: test reward stops improving near this KL
            kl_stop_threshold: 30.0,
            estimator: Estimator::Sf,
            is_clip_range: 0.2,
            is_inner_steps: 2,
            window: 76,
            min_count: None,
            cfg_scale: 5.0,
            seed: 0,
            opt: AdamW { lr: 1e-5, ..AdamW::default() },
            record_wall_time: false,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 || self.sample_minibatch == 0 || self.train_minibatch == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.batch_size % self.sample_minibatch != 0 || self.batch_size % self.train_minibatch != 0 {
            return bad(format!(
                "batch_size {} not divisible by minibatches {}/{}",
                self.batch_size, self.sample_minibatch, self.train_minibatch
            ));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("alpha and beta must be >= 0".into());
        }
        if !(self.is_clip_range > 0.0 && self.is_clip_range < 1.0) || self.is_inner_steps == 0 {
            return bad("IS clip range must be in (0,1) with >= 1 inner step".into());
        }
        if self.window == 0 || !(self.cfg_scale >= 0.0) || !(self.kl_stop_threshold >= 0.0) {
            return bad("window, cfg_scale or kl threshold out of range".into());
        }
        Ok(())
    }

    pub fn min_count_for(&self, num_prompts: usize) -> usize {
        self.min_count.unwrap_or_else(|| (2 * self.batch_size / num_prompts.max(1)).max(2))
    }
}

/// Mean over steps of `logp_current - logp_base`.
pub fn estimate_kl(traj: &Trajectory) -> f64 {
    if traj.steps.is_empty() {
        return 0.0;
    }
    traj.steps.iter().map(|s| s.logp_current - s.logp_base).sum::<f64>() / traj.steps.len() as f64
}

/// Policy-gradient loss over a batch with one effective advantage per
/// trajectory. Adds the loss gradient to `grad` and returns the loss.
/// Trajectories are processed in `chunk`-sized groups in index order.
#[allow(clippy::too_many_arguments)]
pub fn policy_loss(
    params: &DenoiserParams,
    trajs: &[Trajectory],
    advantages: &[f64],
    estimator: Estimator,
    clip: f64,
    schedule: &NoiseSchedule,
    cfg_scale: f64,
    chunk: usize,
    grad: &mut [f64],
) -> Result<f64> {
    if trajs.len() != advantages.len() {
        return Err(Error::MismatchedBatch(format!("{} trajectories, {} advantages", trajs.len(), advantages.len())));
    }
    let n = trajs.len();
    let mut loss = 0.0;
    for (group, advs) in trajs.chunks(chunk.max(1)).zip(advantages.chunks(chunk.max(1))) {
        let mut refs = Vec::new();
        let mut meta = Vec::new();
        for (t, &a) in group.iter().zip(advs) {
            for s in &t.steps {
                refs.push(StepRef::from((s, t.prompt)));
                meta.push((a, s.logp_current));
            }
        }
        if advs.iter().all(|&a| a == 0.0) {
            continue;
        }
        let ev = policy_forward(params, &refs, schedule, cfg_scale)?;
        let mut weights = Vec::with_capacity(refs.len());
        for (&lp, &(a, old)) in ev.logps.iter().zip(&meta) {
            let (l, w) = step_term(estimator, a, lp, old, clip, n);
            loss += l;
            weights.push(w);
        }
        policy_backward(params, &ev, &weights, schedule, grad)?;
    }
    Ok(loss)
}

/// Score-function loss; its gradient is the negated REINFORCE estimate.
pub fn loss_sf(
    params: &DenoiserParams,
    trajs: &[Trajectory],
    advantages: &[f64],
    schedule: &NoiseSchedule,
    cfg_scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    policy_loss(params, trajs, advantages, Estimator::Sf, 0.0, schedule, cfg_scale, trajs.len(), grad)
}

/// Clipped-ratio loss against the log-probabilities recorded at sampling.
pub fn loss_is(
    params: &DenoiserParams,
    trajs: &[Trajectory],
    advantages: &[f64],
    clip: f64,
    schedule: &NoiseSchedule,
    cfg_scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    policy_loss(params, trajs, advantages, Estimator::Is, clip, schedule, cfg_scale, trajs.len(), grad)
}

/// Effective advantage `alpha * A_r - beta * A_kl` fed to the estimator.
#[allow(clippy::too_many_arguments)]
pub fn loss_combined(
    params: &DenoiserParams,
    trajs: &[Trajectory],
    a_r: &[f64],
    a_kl: &[f64],
    alpha: f64,
    beta: f64,
    estimator: Estimator,
    clip: f64,
    schedule: &NoiseSchedule,
    cfg_scale: f64,
    grad: &mut [f64],
) -> Result<f64> {
    if a_r.len() != a_kl.len() {
        return Err(Error::MismatchedBatch(format!("{} reward vs {} KL advantages", a_r.len(), a_kl.len())));
    }
    let eff: Vec<f64> = a_r.iter().zip(a_kl).map(|(r, k)| alpha * r - beta * k).collect();
    policy_loss(params, trajs, &eff, estimator, clip, schedule, cfg_scale, trajs.len(), grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub prompt: PromptId,
    pub reward: f64,
    pub a_r: f64,
    pub kl: f64,
    pub a_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub seed: u64,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub kl_mean: f64,
    pub grad_norm: f64,
    pub wall_time: f64,
    /// Samples whose reward fell back to the failure value.
    pub failures: usize,
    pub per_prompt_reward: BTreeMap<u64, f64>,
}

/// Everything the trainer reads but never changes.
#[derive(Debug, Clone)]
pub struct TrainingEnv<'a> {
    pub base: &'a FrozenDenoiser,
    pub world: &'a World,
    pub mrc: &'a MrcConfig,
    pub schedule: &'a NoiseSchedule,
    pub cfg: &'a TrainerConfig,
}

/// Mutable training state: rolled back as a unit on a failed epoch.
#[derive(Debug, Clone)]
pub struct RlftState {
    pub params: DenoiserParams,
    pub opt: OptState,
    pub tracker: PerPromptStats,
}

impl RlftState {
    pub fn new(base: &FrozenDenoiser, cfg: &TrainerConfig, num_prompts: usize) -> Self {
        let params = base.thaw();
        let opt = OptState::new(cfg.opt, params.len());
        Self { params, opt, tracker: PerPromptStats::new(cfg.window, cfg.min_count_for(num_prompts)) }
    }
}

fn rewards_for(xs: &[Vec<f64>], world: &World, mrc: &MrcConfig) -> Vec<f64> {
    xs.par_iter()
        .map(|x| match decode_sample(x).and_then(|tile| untile(&tile)) {
            Ok(views) => mrc_reward(&views, world.poses(), mrc),
            Err(_) => mrc.r_fail,
        })
        .collect()
}

/// One epoch: sample, score, normalize, update. On any error the state is
/// restored to its value at entry.
pub fn rlft_epoch(state: &mut RlftState, env: &TrainingEnv, prompts: &[PromptId], epoch: usize) -> Result<(EpochLog, Vec<RewardRecord>)> {
    let backup = state.clone();
    let out = epoch_inner(state, env, prompts, epoch);
    if out.is_err() {
        *state = backup;
    }
    out
}

fn epoch_inner(state: &mut RlftState, env: &TrainingEnv, prompts: &[PromptId], epoch: usize) -> Result<(EpochLog, Vec<RewardRecord>)> {
    let cfg = env.cfg;
    cfg.validate()?;
    if prompts.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    let start = Instant::now();
    let mut pick = rng::stream(&[tag::EPOCH, cfg.seed, epoch as u64]);
    let requests: Vec<(PromptId, u64)> = (0..cfg.batch_size)
        .map(|i| (prompts[pick.random_range(0..prompts.len())], hash_keys(&[cfg.seed, epoch as u64, i as u64])))
        .collect();
    let mut trajs = Vec::with_capacity(cfg.batch_size);
    for chunk in requests.chunks(cfg.sample_minibatch) {
        trajs.extend(sample_trajectories(&state.params, env.base, chunk, env.schedule, cfg.cfg_scale)?);
    }
    let finals: Vec<Vec<f64>> = trajs.iter().map(|t| t.x0.clone()).collect();
    let rewards = rewards_for(&finals, env.world, env.mrc);
    let kls: Vec<f64> = trajs.iter().map(estimate_kl).collect();
    let batch_prompts: Vec<PromptId> = requests.iter().map(|r| r.0).collect();
    let a_r = state.tracker.normalize(Quantity::Reward, &batch_prompts, &rewards);
    let a_kl = state.tracker.normalize(Quantity::Kl, &batch_prompts, &kls);
    let eff: Vec<f64> = a_r.iter().zip(&a_kl).map(|(r, k)| cfg.alpha * r - cfg.beta * k).collect();

    let updates = match cfg.estimator {
        Estimator::Sf => 1,
        Estimator::Is => cfg.is_inner_steps,
    };
    let mut grad_norm = 0.0;
    let mut grad = vec![0.0; state.params.len()];
    for u in 0..updates {
        grad.iter_mut().for_each(|g| *g = 0.0);
        policy_loss(
            &state.params,
            &trajs,
            &eff,
            cfg.estimator,
            cfg.is_clip_range,
            env.schedule,
            cfg.cfg_scale,
            cfg.train_minibatch,
            &mut grad,
        )?;
        if u == 0 {
            grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        }
        opt_step(&mut state.params, &grad, &mut state.opt)?;
    }

    let (reward_mean, reward_std) = plain_mean_std(&rewards);
    let mut per: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for (p, r) in batch_prompts.iter().zip(&rewards) {
        let e = per.entry(p.0).or_insert((0.0, 0));
        e.0 += r;
        e.1 += 1;
    }
    let log = EpochLog {
        epoch,
        seed: cfg.seed,
        reward_mean,
        reward_std,
        kl_mean: kls.iter().sum::<f64>() / kls.len() as f64,
        grad_norm,
        wall_time: if cfg.record_wall_time { start.elapsed().as_secs_f64() } else { 0.0 },
        failures: rewards.iter().filter(|&&r| r == env.mrc.r_fail).count(),
        per_prompt_reward: per.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect(),
    };
    let records = (0..rewards.len())
        .map(|i| RewardRecord { prompt: batch_prompts[i], reward: rewards[i], a_r: a_r[i], kl: kls[i], a_kl: a_kl[i] })
        .collect();
    Ok((log, records))
}

fn plain_mean_std(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt())
}

/// True once the latest epoch's mean KL reaches the threshold.
pub fn early_stop_check(logs: &[EpochLog], kl_stop_threshold: f64) -> bool {
    logs.last().is_some_and(|l| l.kl_mean >= kl_stop_threshold)
}

#[derive(Debug, Clone)]
pub struct RlftRun {
    pub state: RlftState,
    pub logs: Vec<EpochLog>,
    /// Epoch whose KL triggered the stop, if any.
    pub stopped_at: Option<usize>,
}

/// Epoch loop with KL early stopping. `on_epoch` sees each log and the
/// state after that epoch's update.
pub fn run_rlft(
    env: &TrainingEnv,
    prompts: &[PromptId],
    epochs: usize,
    mut on_epoch: impl FnMut(&EpochLog, &RlftState) -> Result<()>,
) -> Result<RlftRun> {
    let mut state = RlftState::new(env.base, env.cfg, prompts.len());
    let mut logs = Vec::new();
    let mut stopped_at = None;
    for e in 0..epochs {
        let (log, _) = rlft_epoch(&mut state, env, prompts, e)?;
        logs.push(log);
        on_epoch(logs.last().unwrap(), &state)?;
        if early_stop_check(&logs, env.cfg.kl_stop_threshold) {
            stopped_at = Some(e);
            break;
        }
    }
    Ok(RlftRun { state, logs, stopped_at })
}

/// Mean reward per prompt over `samples_per_prompt` guided samples. Noise
/// keys depend only on `(seed, prompt, sample)`, so two models evaluated
/// with one seed see the same starting noise.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_prompts(
    params: &DenoiserParams,
    prompts: &[PromptId],
    samples_per_prompt: usize,
    world: &World,
    mrc: &MrcConfig,
    schedule: &NoiseSchedule,
    cfg_scale: f64,
    seed: u64,
) -> Result<Vec<(PromptId, f64)>> {
    if prompts.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    if samples_per_prompt == 0 {
        return Err(Error::InvalidConfig("samples_per_prompt must be >= 1".into()));
    }
    let requests: Vec<(PromptId, u64)> = prompts
        .iter()
        .flat_map(|&p| (0..samples_per_prompt).map(move |j| (p, hash_keys(&[tag::CURATE, seed, p.0, j as u64]))))
        .collect();
    let mut finals = Vec::with_capacity(requests.len());
    for chunk in requests.chunks(16) {
        finals.extend(sample_finals(params, chunk, schedule, cfg_scale)?);
    }
    let rewards = rewards_for(&finals, world, mrc);
    Ok(prompts
        .iter()
        .zip(rewards.chunks(samples_per_prompt))
        .map(|(&p, r)| (p, r.iter().sum::<f64>() / r.len() as f64))
        .collect())
}

/// The `k` prompts with the lowest mean reward, ascending; ties keep
/// catalog order.
pub fn select_lowest(means: &[(PromptId, f64)], k: usize) -> Vec<PromptId> {
    let mut v = means.to_vec();
    v.sort_by(|a, b| a.1.total_cmp(&b.1));
    v.into_iter().take(k).map(|(p, _)| p).collect()
}

#[allow(clippy::too_many_arguments)]
pub fn curate_prompts(
    params: &DenoiserParams,
    catalog: &[PromptId],
    k: usize,
    samples_per_prompt: usize,
    world: &World,
    mrc: &MrcConfig,
    schedule: &NoiseSchedule,
    cfg_scale: f64,
    seed: u64,
) -> Result<(Vec<PromptId>, Vec<(PromptId, f64)>)> {
    if catalog.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    if k > catalog.len() {
        return Err(Error::InvalidConfig(format!("k = {k} exceeds the catalog of {}", catalog.len())));
    }
    let means = evaluate_prompts(params, catalog, samples_per_prompt, world, mrc, schedule, cfg_scale, seed)?;
    Ok((select_lowest(&means, k), means))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub batch: usize,
    pub data: usize,
    pub seed: u64,
    pub epoch: usize,
    pub reward: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
}

impl ScalingTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("batch,data,seed,epoch,reward,kl\n");
        for r in &self.rows {
            writeln!(out, "{},{},{},{},{},{}", r.batch, r.data, r.seed, r.epoch, r.reward, r.kl).unwrap();
        }
        out
    }

    /// Reward at the last logged epoch, per (batch, data, seed).
    pub fn finals(&self) -> BTreeMap<(usize, usize, u64), f64> {
        let mut m = BTreeMap::new();
        for r in &self.rows {
            m.insert((r.batch, r.data, r.seed), r.reward);
        }
        m
    }

    /// Per batch size, the data size with the highest seed-mean final
    /// reward.
    pub fn best_data_per_batch(&self) -> BTreeMap<usize, usize> {
        let mut acc: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
        for ((b, d, _), r) in self.finals() {
            let e = acc.entry((b, d)).or_insert((0.0, 0));
            e.0 += r;
            e.1 += 1;
        }
        let mut best: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
        for ((b, d), (s, c)) in acc {
            let m = s / c as f64;
            if best.get(&b).is_none_or(|&(_, bm)| m > bm) {
                best.insert(b, (d, m));
            }
        }
        best.into_iter().map(|(b, (d, _))| (b, d)).collect()
    }

    /// Across-seed population std of the final reward, per cell.
    pub fn final_spread(&self) -> BTreeMap<(usize, usize), f64> {
        let mut acc: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
        for ((b, d, _), r) in self.finals() {
            acc.entry((b, d)).or_default().push(r);
        }
        acc.into_iter().map(|(k, v)| (k, plain_mean_std(&v).1)).collect()
    }
}

/// One run per (batch, data) cell and seed; the data set of size `d` is the
/// first `d` entries of `ranked` (curation order).
pub fn scaling_run(
    env: &TrainingEnv,
    grid: &[(usize, usize)],
    epochs: usize,
    seeds: &[u64],
    ranked: &[PromptId],
) -> Result<ScalingTable> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidConfig("scaling grid and seed list must be nonempty".into()));
    }
    let mut table = ScalingTable::default();
    for &(batch, data) in grid {
        if data == 0 || data > ranked.len() {
            return Err(Error::InvalidConfig(format!("data size {data} outside 1..={}", ranked.len())));
        }
        for &seed in seeds {
            let cfg = TrainerConfig {
                batch_size: batch,
                seed,
                kl_stop_threshold: f64::INFINITY,
                ..env.cfg.clone()
            };
            let sub = TrainingEnv { cfg: &cfg, ..env.clone() };
            let run = run_rlft(&sub, &ranked[..data], epochs, |_, _| Ok(()))?;
            for l in run.logs {
                table.rows.push(ScalingRow { batch, data, seed, epoch: l.epoch, reward: l.reward_mean, kl: l.kl_mean });
            }
        }
    }
    Ok(table)
}
