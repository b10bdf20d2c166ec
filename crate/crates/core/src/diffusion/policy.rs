//! The guided DDIM step as an isotropic Gaussian policy.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{gaussian_log_prob, output_slope, output_to_eps, NoiseSchedule};
use crate::nncore::{backward_batch, forward_batch, Activations, Cond, DenoiserParams, Query};
use crate::rng::{self, tag};
use crate::sceneworld::PromptId;
use crate::{Error, Result};

/// Guided noise prediction for rows sharing nothing but the parameters.
/// A branch whose guidance weight is exactly zero is not evaluated.
struct Guided {
    eps: Vec<f64>,
    cond: Option<Activations>,
    uncond: Option<Activations>,
}

fn guided_eps(
    params: &DenoiserParams,
    xs: &[&[f64]],
    ts: &[usize],
    prompts: &[PromptId],
    w: f64,
    schedule: &NoiseSchedule,
) -> Result<Guided> {
    let d = params.arch().d;
    let n = xs.len();
    let run = |null: bool| -> Result<Activations> {
        let qs: Vec<Query> = (0..n)
            .map(|i| Query { x: xs[i], t: ts[i], cond: if null { Cond::Null } else { Cond::Prompt(prompts[i]) } })
            .collect();
        forward_batch(params, &qs)
    };
    let cond = if w != 0.0 { Some(run(false)?) } else { None };
    let uncond = if w != 1.0 { Some(run(true)?) } else { None };
    let mut eps = match (&cond, &uncond) {
        (Some(c), None) => c.output().to_vec(),
        (None, Some(u)) => u.output().to_vec(),
        (Some(c), Some(u)) => c.output().iter().zip(u.output()).map(|(c, u)| (1.0 - w) * u + w * c).collect(),
        (None, None) => unreachable!(),
    };
    debug_assert_eq!(eps.len(), n * d);
    for ((row, x), &t) in eps.chunks_mut(d).zip(xs).zip(ts) {
        output_to_eps(row, x, schedule.alpha_bars[t]);
    }
    Ok(Guided { eps, cond, uncond })
}

fn check_step(schedule: &NoiseSchedule, k: usize, cfg_scale: f64) -> Result<()> {
    if k >= schedule.steps() {
        return Err(Error::InvalidConfig(format!("step {k} outside {} inference steps", schedule.steps())));
    }
    if !(cfg_scale >= 0.0) {
        return Err(Error::InvalidConfig(format!("cfg_scale {cfg_scale} < 0")));
    }
    Ok(())
}

/// Means of the step-`k` policy for a batch of latents, plus its sigma.
pub fn ddim_step_batch(
    params: &DenoiserParams,
    xs: &[&[f64]],
    k: usize,
    prompts: &[PromptId],
    schedule: &NoiseSchedule,
    cfg_scale: f64,
) -> Result<(Vec<f64>, f64)> {
    check_step(schedule, k, cfg_scale)?;
    if xs.len() != prompts.len() {
        return Err(Error::MismatchedBatch(format!("{} latents, {} prompts", xs.len(), prompts.len())));
    }
    let ts = vec![schedule.timesteps[k]; xs.len()];
    let g = guided_eps(params, xs, &ts, prompts, cfg_scale, schedule)?;
    let (cx, ce) = schedule.mean_coeffs(k);
    let d = params.arch().d;
    let mut mu = g.eps;
    for (row, x) in mu.chunks_mut(d).zip(xs) {
        for (m, xv) in row.iter_mut().zip(x.iter()) {
            *m = cx * xv + ce * *m;
        }
    }
    Ok((mu, schedule.sigmas[k]))
}

/// `(mu, sigma)` of `p(x_{t-1} | x_t, c)` at inference step `k`.
pub fn ddim_step_distribution(
    params: &DenoiserParams,
    x_t: &[f64],
    k: usize,
    prompt: PromptId,
    schedule: &NoiseSchedule,
    cfg_scale: f64,
) -> Result<(Vec<f64>, f64)> {
    ddim_step_batch(params, &[x_t], k, &[prompt], schedule, cfg_scale)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Inference step index; sampling runs from `steps - 1` down to 0.
    pub k: usize,
    pub t: usize,
    pub x_t: Vec<f64>,
    pub mean: Vec<f64>,
    pub sigma: f64,
    pub action: Vec<f64>,
    pub logp_current: f64,
    pub logp_base: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: PromptId,
    pub x_t_init: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub x0: Vec<f64>,
}

fn normals(r: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| r.sample(StandardNormal)).collect()
}

fn chain(
    params: &DenoiserParams,
    base: Option<&DenoiserParams>,
    requests: &[(PromptId, u64)],
    schedule: &NoiseSchedule,
    cfg_scale: f64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<StepRecord>>, Vec<Vec<f64>>)> {
    if schedule.eta <= 0.0 {
        return Err(Error::InvalidConfig("sampling needs eta > 0".into()));
    }
    let d = params.arch().d;
    if let Some(b) = base {
        if b.arch() != params.arch() {
            return Err(Error::DimensionMismatch("base and current architectures differ".into()));
        }
    }
    let mut rngs: Vec<ChaCha8Rng> = requests.iter().map(|&(_, key)| rng::stream(&[tag::TRAJ, key])).collect();
    let starts: Vec<Vec<f64>> = rngs.iter_mut().map(|r| normals(r, d)).collect();
    let prompts: Vec<PromptId> = requests.iter().map(|r| r.0).collect();
    let mut xs = starts.clone();
    let mut records: Vec<Vec<StepRecord>> = vec![Vec::new(); requests.len()];
    for k in (0..schedule.steps()).rev() {
        let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
        let (mu, sigma) = ddim_step_batch(params, &refs, k, &prompts, schedule, cfg_scale)?;
        let mu_base = match base {
            Some(b) => Some(ddim_step_batch(b, &refs, k, &prompts, schedule, cfg_scale)?.0),
            None => None,
        };
        let mut next = Vec::with_capacity(xs.len());
        for (i, r) in rngs.iter_mut().enumerate() {
            let m = &mu[i * d..(i + 1) * d];
            let z = normals(r, d);
            let a: Vec<f64> = m.iter().zip(&z).map(|(m, z)| m + sigma * z).collect();
            if base.is_some() {
                let mb = &mu_base.as_ref().unwrap()[i * d..(i + 1) * d];
                records[i].push(StepRecord {
                    k,
                    t: schedule.timesteps[k],
                    x_t: xs[i].clone(),
                    mean: m.to_vec(),
                    sigma,
                    logp_current: gaussian_log_prob(&a, m, sigma)?,
                    logp_base: gaussian_log_prob(&a, mb, sigma)?,
                    action: a.clone(),
                });
            }
            next.push(a);
        }
        xs = next;
    }
    Ok((starts, records, xs))
}

/// Rolls out one trajectory per `(prompt, key)` request. The noise of each
/// sample comes from its own keyed stream, so results do not depend on how
/// requests are batched. Log-probabilities of the sampled actions are
/// recorded under both the current and the base parameters.
pub fn sample_trajectories(
    current: &DenoiserParams,
    base: &DenoiserParams,
    requests: &[(PromptId, u64)],
    schedule: &NoiseSchedule,
    cfg_scale: f64,
) -> Result<Vec<Trajectory>> {
    let (starts, records, finals) = chain(current, Some(base), requests, schedule, cfg_scale)?;
    Ok(requests
        .iter()
        .zip(starts)
        .zip(records)
        .zip(finals)
        .map(|(((&(prompt, _), x_t_init), steps), x0)| Trajectory { prompt, x_t_init, steps, x0 })
        .collect())
}

pub fn sample_trajectory(
    current: &DenoiserParams,
    base: &DenoiserParams,
    prompt: PromptId,
    key: u64,
    schedule: &NoiseSchedule,
    cfg_scale: f64,
) -> Result<Trajectory> {
    Ok(sample_trajectories(current, base, &[(prompt, key)], schedule, cfg_scale)?.remove(0))
}

/// Final samples only; equal to the `x0` of [`sample_trajectories`] for the
/// same requests and parameters.
pub fn sample_finals(
    params: &DenoiserParams,
    requests: &[(PromptId, u64)],
    schedule: &NoiseSchedule,
    cfg_scale: f64,
) -> Result<Vec<Vec<f64>>> {
    Ok(chain(params, None, requests, schedule, cfg_scale)?.2)
}

/// One recorded transition to re-evaluate under some parameters.
#[derive(Debug, Clone, Copy)]
pub struct StepRef<'a> {
    pub k: usize,
    pub prompt: PromptId,
    pub x_t: &'a [f64],
    pub action: &'a [f64],
}

impl<'a> From<(&'a StepRecord, PromptId)> for StepRef<'a> {
    fn from((s, prompt): (&'a StepRecord, PromptId)) -> Self {
        Self { k: s.k, prompt, x_t: &s.x_t, action: &s.action }
    }
}

/// Log-probabilities of recorded transitions with the state needed for
/// their gradients.
pub struct PolicyEval {
    pub logps: Vec<f64>,
    ks: Vec<usize>,
    /// `(a - mu) / sigma^2`, row-major.
    score: Vec<f64>,
    guided: Guided,
    cfg_scale: f64,
}

pub fn policy_forward(
    params: &DenoiserParams,
    steps: &[StepRef],
    schedule: &NoiseSchedule,
    cfg_scale: f64,
) -> Result<PolicyEval> {
    let d = params.arch().d;
    for s in steps {
        check_step(schedule, s.k, cfg_scale)?;
        if s.x_t.len() != d || s.action.len() != d {
            return Err(Error::DimensionMismatch("recorded step size".into()));
        }
    }
    let xs: Vec<&[f64]> = steps.iter().map(|s| s.x_t).collect();
    let ts: Vec<usize> = steps.iter().map(|s| schedule.timesteps[s.k]).collect();
    let prompts: Vec<PromptId> = steps.iter().map(|s| s.prompt).collect();
    let guided = guided_eps(params, &xs, &ts, &prompts, cfg_scale, schedule)?;
    let mut logps = Vec::with_capacity(steps.len());
    let mut score = vec![0.0; steps.len() * d];
    for (i, s) in steps.iter().enumerate() {
        let (cx, ce) = schedule.mean_coeffs(s.k);
        let sigma = schedule.sigmas[s.k];
        let mu: Vec<f64> = guided.eps[i * d..(i + 1) * d].iter().zip(s.x_t).map(|(e, x)| cx * x + ce * e).collect();
        logps.push(gaussian_log_prob(s.action, &mu, sigma)?);
        for ((g, a), m) in score[i * d..(i + 1) * d].iter_mut().zip(s.action).zip(&mu) {
            *g = (a - m) / (sigma * sigma);
        }
    }
    Ok(PolicyEval { logps, ks: steps.iter().map(|s| s.k).collect(), score, guided, cfg_scale })
}

/// Adds `sum_i weights[i] * grad logp_i` to `grad`.
pub fn policy_backward(
    params: &DenoiserParams,
    eval: &PolicyEval,
    weights: &[f64],
    schedule: &NoiseSchedule,
    grad: &mut [f64],
) -> Result<()> {
    if weights.len() != eval.logps.len() {
        return Err(Error::MismatchedBatch(format!("{} weights for {} steps", weights.len(), eval.logps.len())));
    }
    let d = params.arch().d;
    let w = eval.cfg_scale;
    let mut base_up = eval.score.clone();
    for (i, row) in base_up.chunks_mut(d).enumerate() {
        let k = eval.ks[i];
        let c = weights[i] * schedule.mean_coeffs(k).1 * output_slope(schedule.alpha_bar(k));
        row.iter_mut().for_each(|v| *v *= c);
    }
    if let Some(acts) = &eval.guided.cond {
        let up: Vec<f64> = base_up.iter().map(|v| w * v).collect();
        backward_batch(params, acts, &up, grad)?;
    }
    if let Some(acts) = &eval.guided.uncond {
        let up: Vec<f64> = base_up.iter().map(|v| (1.0 - w) * v).collect();
        backward_batch(params, acts, &up, grad)?;
    }
    Ok(())
}
