//! Flat run configuration. Every key has a default; unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use mvrc_core::diffusion::{NoiseSchedule, SftConfig};
use mvrc_core::imgproc::MetricKind;
use mvrc_core::mrc::{MrcConfig, World};
use mvrc_core::nncore::{AdamW, Arch};
use mvrc_core::reconstructor::ReconConfig;
use mvrc_core::rlft::{Estimator, TrainerConfig};
use mvrc_core::sceneworld::{CameraPose, PromptId, ViewRig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Prompts `0..catalog_size` form the training and test catalog.
    pub catalog_size: u64,

    pub scene_res: usize,
    pub view_res: usize,
    pub rig_azimuth: [f64; 4],
    pub rig_elevation: [f64; 4],

    pub mrc_metric: String,
    pub mrc_resize: usize,
    pub mrc_tau: f64,
    pub mrc_bbox_norm: bool,
    pub mrc_r_fail: f64,
    pub recon_res: usize,
    pub recon_lambda: f64,
    pub recon_max_iters: usize,
    pub recon_tol: f64,

    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub inference_steps: usize,
    pub eta: f64,

    pub hidden: usize,
    pub emb_dim: usize,
    pub freqs: usize,

    pub sft_steps: usize,
    pub sft_batch: usize,
    pub sft_drop_prob: f64,
    pub sft_lr: f64,

    pub alpha: f64,
    pub beta: f64,
    pub batch_size: usize,
    pub sample_minibatch: usize,
    pub train_minibatch: usize,
    pub epochs_max: usize,
    /// Negative disables early stopping.
    pub kl_stop_threshold: f64,
    pub estimator: String,
    pub is_clip_range: f64,
    pub is_inner_steps: usize,
    pub window: usize,
    /// 0 selects twice the expected samples per prompt per batch.
    pub min_count: usize,
    pub cfg_scale: f64,
    pub rlft_lr: f64,
    pub record_wall_time: bool,

    pub curate_k: usize,
    pub curate_samples: usize,
    pub eval_samples: usize,
    /// `sft` or `rlft`.
    pub eval_checkpoint: String,
    pub sample_pngs: usize,

    pub distort_prompts: Vec<u64>,
    pub distort_seed: u64,

    pub scale_grid: Vec<[usize; 2]>,
    pub scale_seeds: Vec<u64>,
    pub scale_epochs: usize,

    pub plot_input: Option<PathBuf>,
    /// `reward`, `kl`, `distortion`, `scaling` or `lines`.
    pub plot_kind: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainerConfig::default();
        let m = MrcConfig::default();
        let s = NoiseSchedule::toy();
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            catalog_size: 16,
            scene_res: 16,
            view_res: 32,
            rig_azimuth: [0.0, 90.0, 180.0, 270.0],
            rig_elevation: [20.0; 4],
            mrc_metric: m.metric.name().into(),
            mrc_resize: m.resize_res,
            mrc_tau: m.tau,
            mrc_bbox_norm: m.bbox_norm,
            mrc_r_fail: m.r_fail,
            recon_res: m.recon_resolution,
            recon_lambda: m.recon.lambda_reg,
            recon_max_iters: m.recon.max_iters,
            recon_tol: m.recon.tol,
            t_train: s.t_train,
            beta_start: s.betas[0],
            beta_end: s.betas[s.t_train - 1],
            inference_steps: s.steps(),
            eta: s.eta,
            hidden: 256,
            emb_dim: 16,
            freqs: 8,
            sft_steps: 3000,
            sft_batch: 16,
            sft_drop_prob: 0.1,
            sft_lr: 3e-4,
            alpha: t.alpha,
            beta: t.beta,
            batch_size: t.batch_size,
            sample_minibatch: t.sample_minibatch,
            train_minibatch: t.train_minibatch,
            epochs_max: t.epochs_max,
            kl_stop_threshold: t.kl_stop_threshold,
            estimator: t.estimator.name().into(),
            is_clip_range: t.is_clip_range,
            is_inner_steps: t.is_inner_steps,
            window: t.window,
            min_count: 0,
            cfg_scale: t.cfg_scale,
            rlft_lr: t.opt.lr,
            record_wall_time: false,
            curate_k: 8,
            curate_samples: 4,
            eval_samples: 4,
            eval_checkpoint: "rlft".into(),
            sample_pngs: 4,
            distort_prompts: vec![0, 1, 2, 3],
            distort_seed: 7,
            scale_grid: vec![[32, 2], [32, 8], [64, 2], [64, 8]],
            scale_seeds: vec![0, 1],
            scale_epochs: 10,
            plot_input: None,
            plot_kind: "lines".into(),
        }
    }
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Builds every derived configuration once so that errors surface
    /// before any stage runs.
    pub fn validate(&self) -> Result<(), CliError> {
        self.world()?;
        self.mrc()?;
        self.schedule()?;
        self.arch()?;
        self.trainer()?;
        if self.catalog_size == 0 {
            return Err(bad("catalog_size must be >= 1"));
        }
        if self.curate_k == 0 || self.curate_k as u64 > self.catalog_size {
            return Err(bad(format!("curate_k {} outside 1..={}", self.curate_k, self.catalog_size)));
        }
        if self.curate_samples == 0 || self.eval_samples == 0 {
            return Err(bad("curate_samples and eval_samples must be >= 1"));
        }
        if !matches!(self.eval_checkpoint.as_str(), "sft" | "rlft") {
            return Err(bad(format!("eval_checkpoint {:?} is neither sft nor rlft", self.eval_checkpoint)));
        }
        if !(0.0..=1.0).contains(&self.sft_drop_prob) || self.sft_batch == 0 || !(self.sft_lr > 0.0) {
            return Err(bad("sft settings out of range"));
        }
        crate::plot::PlotKind::parse(&self.plot_kind)?;
        Ok(())
    }

    pub fn world(&self) -> Result<World, CliError> {
        let poses = std::array::from_fn(|i| CameraPose::new(self.rig_azimuth[i], self.rig_elevation[i]));
        let rig = ViewRig::new(poses, self.view_res).map_err(|e| bad(e.to_string()))?;
        let w = World::new(self.scene_res, self.view_res).map_err(|e| bad(e.to_string()))?;
        Ok(World { rig, ..w })
    }

    pub fn mrc(&self) -> Result<MrcConfig, CliError> {
        let metric = MetricKind::parse(&self.mrc_metric).ok_or_else(|| bad(format!("unknown metric {:?}", self.mrc_metric)))?;
        let m = MrcConfig {
            resize_res: self.mrc_resize,
            metric,
            tau: self.mrc_tau,
            recon: ReconConfig { lambda_reg: self.recon_lambda, max_iters: self.recon_max_iters, tol: self.recon_tol },
            recon_resolution: self.recon_res,
            bbox_norm: self.mrc_bbox_norm,
            r_fail: self.mrc_r_fail,
        };
        m.validate().map_err(|e| bad(e.to_string()))?;
        Ok(m)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, CliError> {
        NoiseSchedule::linear(self.t_train, self.beta_start, self.beta_end, self.inference_steps, self.eta)
            .map_err(|e| bad(e.to_string()))
    }

    pub fn arch(&self) -> Result<Arch, CliError> {
        let d = 4 * self.view_res * self.view_res;
        Arch::new(d, self.hidden, self.emb_dim, self.freqs, self.catalog_size as usize).map_err(|e| bad(e.to_string()))
    }

    pub fn sft(&self) -> SftConfig {
        SftConfig {
            steps: self.sft_steps,
            batch: self.sft_batch,
            drop_prob: self.sft_drop_prob,
            seed: self.seed,
            opt: AdamW { lr: self.sft_lr, ..AdamW::default() },
        }
    }

    pub fn trainer(&self) -> Result<TrainerConfig, CliError> {
        let t = TrainerConfig {
            alpha: self.alpha,
            beta: self.beta,
            batch_size: self.batch_size,
            sample_minibatch: self.sample_minibatch,
            train_minibatch: self.train_minibatch,
            epochs_max: self.epochs_max,
            kl_stop_threshold: if self.kl_stop_threshold < 0.0 { f64::INFINITY } else { self.kl_stop_threshold },
            estimator: Estimator::parse(&self.estimator).map_err(|e| bad(e.to_string()))?,
            is_clip_range: self.is_clip_range,
            is_inner_steps: self.is_inner_steps,
            window: self.window,
            min_count: (self.min_count > 0).then_some(self.min_count),
            cfg_scale: self.cfg_scale,
            seed: self.seed,
            opt: AdamW { lr: self.rlft_lr, ..AdamW::default() },
            record_wall_time: self.record_wall_time,
        };
        t.validate().map_err(|e| bad(e.to_string()))?;
        Ok(t)
    }

    pub fn catalog(&self) -> Vec<PromptId> {
        (0..self.catalog_size).map(PromptId).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(RunConfig::from_toml("sed = 3"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::from_toml("estimator = \"ppo\""), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::from_toml("batch_size = 60"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::from_toml("curate_k = 17"), Err(CliError::Config(_))));
        let c = RunConfig::from_toml("seed = 5\ncatalog_size = 8\ncurate_k = 8").unwrap();
        assert_eq!((c.seed, c.catalog_size, c.batch_size), (5, 8, 64));
    }
}
