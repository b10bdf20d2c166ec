//! Noise schedule, forward noising, the DDIM step as a Gaussian policy,
//! trajectory sampling and supervised noise-prediction training.
//!
//! Model space is `x = 2 * intensity - 1` on the 2x2 view tile, so the white
//! background sits at +1. Samples are mapped back and clamped only when an
//! image is needed.
//!
//! The network's raw output is read as a clean-tile estimate `x0_hat` and
//! turned into the noise prediction `eps_hat = (x_t - sqrt(ab) x0_hat) /
//! sqrt(1 - ab)`. The MLP has a rank-H bottleneck and cannot carry the
//! identity-like part of the noise; this form supplies it analytically.
//! Everything downstream, including the training loss, sees `eps_hat`.

mod dataset;
mod policy;
mod sft;

use serde::{Deserialize, Serialize};

use crate::imgproc::Image;
use crate::{Error, Result};

pub use dataset::{read_dataset, write_dataset, Dataset, ManifestRow};
pub use policy::{
    ddim_step_batch, ddim_step_distribution, policy_backward, policy_forward, sample_finals, sample_trajectories,
    sample_trajectory, PolicyEval, StepRecord, StepRef, Trajectory,
};
pub use sft::{sft_train, SftConfig, SftReport};

/// Linear beta schedule over `t_train` steps with `steps` evenly spaced
/// inference timesteps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub t_train: usize,
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    /// Training timestep of each inference step, ascending.
    pub timesteps: Vec<usize>,
    pub eta: f64,
    pub sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// `beta_start..=beta_end` linearly over `t_train` steps.
    pub fn linear(t_train: usize, beta_start: f64, beta_end: f64, steps: usize, eta: f64) -> Result<Self> {
        if t_train < 2 || steps == 0 || steps > t_train {
            return Err(Error::InvalidConfig(format!("need 0 < steps ({steps}) <= t_train ({t_train}), t_train >= 2")));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidConfig(format!("betas {beta_start}..{beta_end} outside (0,1)")));
        }
        if !(eta >= 0.0) {
            return Err(Error::InvalidConfig(format!("eta {eta} < 0")));
        }
        let betas: Vec<f64> = (0..t_train)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_train - 1) as f64)
            .collect();
        let mut alpha_bars = Vec::with_capacity(t_train);
        let mut acc = 1.0;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        let timesteps: Vec<usize> = (0..steps).map(|k| (k + 1) * t_train / steps - 1).collect();
        let mut s = Self { t_train, betas, alpha_bars, timesteps, eta, sigmas: Vec::new() };
        s.sigmas = (0..steps)
            .map(|k| {
                let (a, ap) = (s.alpha_bar(k), s.alpha_bar_prev(k));
                eta * ((1.0 - ap) / (1.0 - a)).sqrt() * (1.0 - a / ap).sqrt()
            })
            .collect();
        if eta > 0.0 && s.sigmas.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidConfig("an inference step has zero variance".into()));
        }
        Ok(s)
    }

    /// Toy default: linear betas 1e-4..0.02 over 1000 training steps, 20
    /// inference steps, eta 1. Only the inference steps cost time.
    pub fn toy() -> Self {
        Self::linear(1000, 1e-4, 0.02, 20, 1.0).expect("toy schedule is valid")
    }

    pub fn steps(&self) -> usize {
        self.timesteps.len()
    }

    /// `alpha_bar` at inference step `k`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bars[self.timesteps[k]]
    }

    /// `alpha_bar` the step lands on; the last step lands on `alpha_bar[0]`
    /// so its variance stays positive.
    pub fn alpha_bar_prev(&self, k: usize) -> f64 {
        if k == 0 {
            self.alpha_bars[0]
        } else {
            self.alpha_bars[self.timesteps[k - 1]]
        }
    }

    /// Coefficients `(c_x, c_eps)` with `mu = c_x * x_t + c_eps * eps_hat`.
    pub fn mean_coeffs(&self, k: usize) -> (f64, f64) {
        let (a, ap, s) = (self.alpha_bar(k), self.alpha_bar_prev(k), self.sigmas[k]);
        let c_x = (ap / a).sqrt();
        let c_eps = (1.0 - ap - s * s).max(0.0).sqrt() - ap.sqrt() * (1.0 - a).sqrt() / a.sqrt();
        (c_x, c_eps)
    }
}

/// Rewrites a network output row into a noise prediction in place.
pub(crate) fn output_to_eps(row: &mut [f64], x_t: &[f64], ab: f64) {
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    for (o, x) in row.iter_mut().zip(x_t) {
        *o = (x - a * *o) / b;
    }
}

/// `d eps_hat / d output`.
pub(crate) fn output_slope(ab: f64) -> f64 {
    -(ab / (1.0 - ab)).sqrt()
}

/// `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if x0.len() != eps.len() {
        return Err(Error::DimensionMismatch(format!("x0 {} vs eps {}", x0.len(), eps.len())));
    }
    let ab = *schedule
        .alpha_bars
        .get(t)
        .ok_or_else(|| Error::InvalidConfig(format!("timestep {t} outside schedule")))?;
    Ok(q_sample_with(x0, ab, eps))
}

pub(crate) fn q_sample_with(x0: &[f64], ab: f64, eps: &[f64]) -> Vec<f64> {
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect()
}

/// `log N(action; mean, sigma^2 I)`.
pub fn gaussian_log_prob(action: &[f64], mean: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::NonPositiveSigma(sigma));
    }
    if action.len() != mean.len() {
        return Err(Error::DimensionMismatch(format!("action {} vs mean {}", action.len(), mean.len())));
    }
    let sq: f64 = action.iter().zip(mean).map(|(a, m)| (a - m) * (a - m)).sum();
    let d = action.len() as f64;
    Ok(-0.5 * d * (2.0 * std::f64::consts::PI * sigma * sigma).ln() - sq / (2.0 * sigma * sigma))
}

/// Intensities to model space.
pub fn encode_image(img: &Image) -> Vec<f64> {
    img.data().iter().map(|v| 2.0 * v - 1.0).collect()
}

/// Model space to a clamped square image.
pub fn decode_sample(x: &[f64]) -> Result<Image> {
    let side = (x.len() as f64).sqrt().round() as usize;
    if side * side != x.len() || side == 0 {
        return Err(Error::DimensionMismatch(format!("{} values do not form a square", x.len())));
    }
    Image::from_clamped(side, side, x.iter().map(|v| (v + 1.0) / 2.0).collect())
}

#[cfg(test)]
mod tests;
