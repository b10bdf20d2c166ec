//! Reward finetuning of the diffusion policy: per-prompt advantage
//! tracking, KL estimates against the frozen base, SF and IS policy
//! gradients, the epoch loop with KL early stopping, prompt curation and
//! batch/data scaling runs.

mod estimator;
mod tracker;
mod trainer;

pub use estimator::{step_term, Estimator};
pub use tracker::{mean_std, normalize_advantage, PerPromptStats, Quantity, Window, ADV_CLIP, SIGMA_FLOOR};
pub use trainer::{
    curate_prompts, early_stop_check, estimate_kl, evaluate_prompts, loss_combined, loss_is, loss_sf, policy_loss,
    rlft_epoch, run_rlft, scaling_run, select_lowest, EpochLog, RewardRecord, RlftRun, RlftState, ScalingRow,
    ScalingTable, TrainerConfig, TrainingEnv,
};
