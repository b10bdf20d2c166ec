//! Multi-view reconstruction consistency.
//!
//! Reconstruct a grid from the four views, re-render it at the same poses,
//! crop original and re-rendered views to the square foreground box of the
//! original, resize both, and average an image distance over the views.
//! The negated score is the finetuning reward.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::imgproc::{compute_square_bbox, crop_and_resize, foreground_mask, Image, MetricKind, SquareBbox};
use crate::reconstructor::{reconstruct, rerender, ReconConfig, ReconDiagnostics};
use crate::sceneworld::{
    generate_scene, patch_distort, render_multiview, rotation_distort, CameraPose, PromptId, ViewRig,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrcConfig {
    pub resize_res: usize,
    pub metric: MetricKind,
    pub tau: f64,
    pub recon: ReconConfig,
    /// Grid resolution used by the reconstructor.
    pub recon_resolution: usize,
    pub bbox_norm: bool,
    /// Reward assigned when the metric is undefined for a sample.
    pub r_fail: f64,
}

impl Default for MrcConfig {
    fn default() -> Self {
        Self {
            resize_res: 64,
            metric: MetricKind::Msgd,
            tau: crate::imgproc::DEFAULT_TAU,
            recon: ReconConfig::default(),
            recon_resolution: 16,
            bbox_norm: true,
            r_fail: -1.0,
        }
    }
}

impl MrcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resize_res < 16 {
            return Err(Error::InvalidConfig(format!("resize_res {} < 16", self.resize_res)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidConfig(format!("tau {} outside (0,1)", self.tau)));
        }
        self.recon.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrcResult {
    pub score: f64,
    pub per_view: [f64; 4],
    pub bboxes: [SquareBbox; 4],
    pub recon: ReconDiagnostics,
}

/// Which image a crop was taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewSource {
    Original,
    Rerendered,
}

/// Pipeline steps, reported in execution order to an observer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MrcStage {
    Reconstruct,
    Rerender,
    Bbox(usize),
    CropResize(usize, ViewSource),
    Distance(usize),
    Mean,
}

/// Original views next to their re-renderings.
#[derive(Debug, Clone)]
pub struct ReconstructedViews {
    pub originals: [Image; 4],
    pub rerendered: [Image; 4],
    pub diagnostics: ReconDiagnostics,
}

fn check_views(views: &[Image; 4], cfg: &MrcConfig) -> Result<()> {
    cfg.validate()?;
    let n = views[0].width();
    if views.iter().any(|v| v.width() != n || v.height() != n) {
        return Err(Error::DimensionMismatch("views must be squares of one size".into()));
    }
    if views.iter().any(|v| !foreground_mask(v, cfg.tau).any()) {
        return Err(Error::NoForeground);
    }
    Ok(())
}

fn reconstruct_stage(
    views: &[Image; 4],
    poses: &[CameraPose; 4],
    cfg: &MrcConfig,
    observe: &mut dyn FnMut(MrcStage),
) -> Result<ReconstructedViews> {
    let rec = reconstruct(views, poses, cfg.recon_resolution, &cfg.recon)?;
    observe(MrcStage::Reconstruct);
    let rerendered = rerender(&rec.scene, poses, views[0].width());
    observe(MrcStage::Rerender);
    Ok(ReconstructedViews { originals: views.clone(), rerendered, diagnostics: rec.diagnostics })
}

/// Distance stage on already reconstructed views.
pub fn score_views(
    rv: &ReconstructedViews,
    cfg: &MrcConfig,
    metric: MetricKind,
    observe: &mut dyn FnMut(MrcStage),
) -> Result<MrcResult> {
    let mut per_view = [0.0; 4];
    let mut bboxes = [SquareBbox { x_min: 0, y_min: 0, x_max: 0, y_max: 0 }; 4];
    for i in 0..4 {
        let (orig, nerf) = (&rv.originals[i], &rv.rerendered[i]);
        let bbox = compute_square_bbox(orig, cfg.tau)?;
        observe(MrcStage::Bbox(i));
        bboxes[i] = bbox;
        let frame = if cfg.bbox_norm { bbox } else { SquareBbox::full(orig).expect("views are square") };
        let a = crop_and_resize(orig, frame, cfg.resize_res)?;
        observe(MrcStage::CropResize(i, ViewSource::Original));
        let b = crop_and_resize(nerf, frame, cfg.resize_res)?;
        observe(MrcStage::CropResize(i, ViewSource::Rerendered));
        per_view[i] = metric.distance(&a, &b)?;
        observe(MrcStage::Distance(i));
    }
    let score = per_view.iter().sum::<f64>() / 4.0;
    observe(MrcStage::Mean);
    Ok(MrcResult { score, per_view, bboxes, recon: rv.diagnostics.clone() })
}

/// Runs the metric, reporting each stage to `observe` as it completes.
pub fn compute_mrc_observed(
    views: &[Image; 4],
    poses: &[CameraPose; 4],
    cfg: &MrcConfig,
    observe: &mut dyn FnMut(MrcStage),
) -> Result<MrcResult> {
    check_views(views, cfg)?;
    let rv = reconstruct_stage(views, poses, cfg, observe)?;
    score_views(&rv, cfg, cfg.metric, observe)
}

/// Reconstruction and re-rendering without scoring, for inspection.
pub fn reconstruct_views(views: &[Image; 4], poses: &[CameraPose; 4], cfg: &MrcConfig) -> Result<ReconstructedViews> {
    check_views(views, cfg)?;
    reconstruct_stage(views, poses, cfg, &mut |_| {})
}

pub fn compute_mrc(views: &[Image; 4], poses: &[CameraPose; 4], cfg: &MrcConfig) -> Result<MrcResult> {
    compute_mrc_observed(views, poses, cfg, &mut |_| {})
}

/// Negated metric; any failure maps to `cfg.r_fail`.
pub fn mrc_reward(views: &[Image; 4], poses: &[CameraPose; 4], cfg: &MrcConfig) -> f64 {
    match compute_mrc(views, poses, cfg) {
        Ok(r) if r.score.is_finite() => -r.score,
        _ => cfg.r_fail,
    }
}

/// The scene resolution and camera rig of the toy world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub scene_res: usize,
    pub rig: ViewRig,
}

impl World {
    pub fn new(scene_res: usize, view_res: usize) -> Result<Self> {
        if scene_res < 4 {
            return Err(Error::InvalidConfig(format!("scene_res {scene_res} < 4")));
        }
        Ok(Self { scene_res, rig: ViewRig::canonical(view_res)? })
    }

    pub fn view_res(&self) -> usize {
        self.rig.view_res()
    }

    pub fn poses(&self) -> &[CameraPose; 4] {
        self.rig.poses()
    }

    /// Ground-truth views of a catalog prompt.
    pub fn gt_views(&self, prompt: PromptId) -> [Image; 4] {
        render_multiview(&generate_scene(prompt, self.scene_res), &self.rig).0
    }
}

impl Default for World {
    fn default() -> Self {
        Self::new(16, 32).expect("default world is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DistortionKind {
    Patch,
    Azimuth,
    Elevation,
}

impl DistortionKind {
    pub const ALL: [DistortionKind; 3] = [DistortionKind::Patch, DistortionKind::Azimuth, DistortionKind::Elevation];

    pub fn name(self) -> &'static str {
        match self {
            DistortionKind::Patch => "patch",
            DistortionKind::Azimuth => "azimuth",
            DistortionKind::Elevation => "elevation",
        }
    }

    /// Default intensity ladders: pixel sizes for patches, degrees for
    /// rotations.
    pub fn default_intensities(self) -> Vec<f64> {
        match self {
            DistortionKind::Patch => vec![0.0, 4.0, 8.0, 12.0, 16.0],
            DistortionKind::Azimuth => vec![0.0, 3.6, 7.2, 10.8],
            DistortionKind::Elevation => vec![0.0, 4.0, 8.0, 12.0],
        }
    }
}

/// Index of the view that receives the distortion.
pub const DISTORTED_VIEW: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionCurve {
    pub distortion_kind: DistortionKind,
    pub metric: MetricKind,
    pub intensities: Vec<f64>,
    pub scores: Vec<f64>,
    pub prompt: PromptId,
    pub seed: u64,
}

impl DistortionCurve {
    /// Mean absolute second difference of the min-max normalized curve.
    pub fn smoothness(&self) -> f64 {
        smoothness(&self.scores)
    }

    pub fn is_monotone(&self) -> bool {
        self.scores.windows(2).all(|w| w[1] >= w[0])
    }
}

pub fn smoothness(scores: &[f64]) -> f64 {
    if scores.len() < 3 {
        return 0.0;
    }
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let norm: Vec<f64> = scores.iter().map(|s| if span > 0.0 { (s - lo) / span } else { 0.0 }).collect();
    let diffs: Vec<f64> = norm.windows(3).map(|w| (w[2] - 2.0 * w[1] + w[0]).abs()).collect();
    diffs.iter().sum::<f64>() / diffs.len() as f64
}

fn check_intensities(kind: DistortionKind, intensities: &[f64], view_res: usize) -> Result<()> {
    if intensities.is_empty() {
        return Err(Error::InvalidIntensities("empty intensity list".into()));
    }
    if intensities[0] != 0.0 {
        return Err(Error::InvalidIntensities("intensities must start at 0".into()));
    }
    if intensities.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidIntensities("intensities must be strictly increasing".into()));
    }
    if kind == DistortionKind::Patch
        && intensities.iter().any(|&s| s.fract() != 0.0 || s > view_res as f64)
    {
        return Err(Error::InvalidIntensities(format!("patch sizes must be integers <= {view_res}")));
    }
    Ok(())
}

/// Ground-truth views with view [`DISTORTED_VIEW`] distorted at `intensity`.
pub fn distorted_views(
    world: &World,
    prompt: PromptId,
    kind: DistortionKind,
    intensity: f64,
    seed: u64,
) -> Result<[Image; 4]> {
    let scene = generate_scene(prompt, world.scene_res);
    let (mut views, _) = render_multiview(&scene, &world.rig);
    let pose = world.poses()[DISTORTED_VIEW];
    views[DISTORTED_VIEW] = match kind {
        DistortionKind::Patch => patch_distort(&views[DISTORTED_VIEW], intensity as usize, seed)?,
        DistortionKind::Azimuth => rotation_distort(&scene, pose, intensity, 0.0, world.view_res()),
        DistortionKind::Elevation => rotation_distort(&scene, pose, 0.0, intensity, world.view_res()),
    };
    Ok(views)
}

fn reconstruct_ladder(
    world: &World,
    prompt: PromptId,
    kind: DistortionKind,
    intensities: &[f64],
    cfg: &MrcConfig,
    seed: u64,
) -> Result<Vec<ReconstructedViews>> {
    check_intensities(kind, intensities, world.view_res())?;
    intensities
        .par_iter()
        .map(|&s| {
            let views = distorted_views(world, prompt, kind, s, seed)?;
            check_views(&views, cfg)?;
            reconstruct_stage(&views, world.poses(), cfg, &mut |_| {})
        })
        .collect()
}

/// Metric score at each distortion intensity for one prompt.
pub fn distortion_experiment(
    world: &World,
    prompt: PromptId,
    kind: DistortionKind,
    intensities: &[f64],
    cfg: &MrcConfig,
    seed: u64,
) -> Result<DistortionCurve> {
    let ladder = reconstruct_ladder(world, prompt, kind, intensities, cfg, seed)?;
    let scores = ladder
        .iter()
        .map(|rv| score_views(rv, cfg, cfg.metric, &mut |_| {}).map(|r| r.score))
        .collect::<Result<Vec<_>>>()?;
    Ok(DistortionCurve {
        distortion_kind: kind,
        metric: cfg.metric,
        intensities: intensities.to_vec(),
        scores,
        prompt,
        seed,
    })
}

/// Curves for every metric kind over a prompt corpus. Distortion and
/// reconstruction run once per (prompt, intensity); only the distance
/// stage differs between kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricComparison {
    pub distortion_kind: DistortionKind,
    pub intensities: Vec<f64>,
    pub curves: BTreeMap<MetricKind, Vec<DistortionCurve>>,
    /// Mean over prompts of each curve's smoothness statistic.
    pub smoothness: BTreeMap<MetricKind, f64>,
}

impl MetricComparison {
    /// Mean score over prompts, per kind and intensity.
    pub fn mean_curve(&self, metric: MetricKind) -> Vec<f64> {
        let curves = &self.curves[&metric];
        (0..self.intensities.len())
            .map(|i| curves.iter().map(|c| c.scores[i]).sum::<f64>() / curves.len() as f64)
            .collect()
    }

    /// `kind,intensity,score` rows with the score averaged over prompts.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,intensity,score\n");
        for &metric in self.curves.keys() {
            for (x, y) in self.intensities.iter().zip(self.mean_curve(metric)) {
                writeln!(out, "{},{},{}", metric.name(), x, y).unwrap();
            }
        }
        out
    }

    pub fn smoothness_csv(&self) -> String {
        let mut out = String::from("kind,smoothness\n");
        for (k, s) in &self.smoothness {
            writeln!(out, "{},{}", k.name(), s).unwrap();
        }
        out
    }
}

pub fn metric_comparison_report(
    world: &World,
    prompts: &[PromptId],
    kind: DistortionKind,
    intensities: &[f64],
    cfg: &MrcConfig,
    seed: u64,
) -> Result<MetricComparison> {
    if prompts.is_empty() {
        return Err(Error::EmptyCatalog);
    }
    let ladders = prompts
        .iter()
        .map(|&p| reconstruct_ladder(world, p, kind, intensities, cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    let mut curves = BTreeMap::new();
    let mut smooth = BTreeMap::new();
    for metric in MetricKind::ALL {
        let per_prompt = prompts
            .iter()
            .zip(&ladders)
            .map(|(&prompt, ladder)| {
                let scores = ladder
                    .iter()
                    .map(|rv| score_views(rv, cfg, metric, &mut |_| {}).map(|r| r.score))
                    .collect::<Result<Vec<_>>>()?;
                Ok(DistortionCurve {
                    distortion_kind: kind,
                    metric,
                    intensities: intensities.to_vec(),
                    scores,
                    prompt,
                    seed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let s = per_prompt.iter().map(DistortionCurve::smoothness).sum::<f64>() / per_prompt.len() as f64;
        smooth.insert(metric, s);
        curves.insert(metric, per_prompt);
    }
    Ok(MetricComparison { distortion_kind: kind, intensities: intensities.to_vec(), curves, smoothness: smooth })
}

/// One curve as `kind,intensity,score` rows.
pub fn curve_csv(curve: &DistortionCurve) -> String {
    let mut out = String::from("kind,intensity,score\n");
    for (x, y) in curve.intensities.iter().zip(&curve.scores) {
        writeln!(out, "{},{},{}", curve.metric.name(), x, y).unwrap();
    }
    out
}

/// Consistent-views floor: mean + 3σ (sample σ) of the score on the ground
/// truth views of prompts `0..n`.
pub fn consistent_floor(world: &World, cfg: &MrcConfig, n: u64) -> Result<f64> {
    if n < 2 {
        return Err(Error::InvalidConfig("floor needs at least 2 scenes".into()));
    }
    let scores = (0..n)
        .into_par_iter()
        .map(|p| compute_mrc(&world.gt_views(PromptId(p)), world.poses(), cfg).map(|r| r.score))
        .collect::<Result<Vec<_>>>()?;
    let mean = scores.iter().sum::<f64>() / n as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(mean + 3.0 * var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    // Measured over prompts 0..16 with the default world and config.
    const FLOOR: f64 = 0.0041;

    fn world() -> World {
        World::default()
    }

    #[test]
    fn stages_run_in_pipeline_order() {
        let w = world();
        let mut seen = Vec::new();
        compute_mrc_observed(&w.gt_views(PromptId(0)), w.poses(), &MrcConfig::default(), &mut |s| seen.push(s))
            .unwrap();
        let mut want = vec![MrcStage::Reconstruct, MrcStage::Rerender];
        for i in 0..4 {
            want.push(MrcStage::Bbox(i));
            want.push(MrcStage::CropResize(i, ViewSource::Original));
            want.push(MrcStage::CropResize(i, ViewSource::Rerendered));
            want.push(MrcStage::Distance(i));
        }
        want.push(MrcStage::Mean);
        assert_eq!(seen, want);
    }

    #[test]
    fn score_is_mean_of_views() {
        let w = world();
        let r = compute_mrc(&w.gt_views(PromptId(1)), w.poses(), &MrcConfig::default()).unwrap();
        assert_eq!(r.score, r.per_view.iter().sum::<f64>() / 4.0);
    }

    #[test]
    fn consistent_views_stay_under_floor() {
        let w = world();
        let cfg = MrcConfig::default();
        for p in 0..4 {
            let views = w.gt_views(PromptId(p));
            let r = compute_mrc(&views, w.poses(), &cfg).unwrap();
            assert!(r.score > 0.0 && r.score <= FLOOR, "prompt {p}: {}", r.score);
            assert!(mrc_reward(&views, w.poses(), &cfg) >= -FLOOR);
        }
    }

    #[test]
    fn large_patch_raises_score() {
        let w = world();
        let cfg = MrcConfig::default();
        for p in 0..2 {
            let clean = w.gt_views(PromptId(p));
            let mut bad = clean.clone();
            bad[DISTORTED_VIEW] = patch_distort(&clean[DISTORTED_VIEW], w.view_res() / 2, 3).unwrap();
            let a = compute_mrc(&clean, w.poses(), &cfg).unwrap().score;
            let b = compute_mrc(&bad, w.poses(), &cfg).unwrap().score;
            assert!(b > a);
            assert!(mrc_reward(&bad, w.poses(), &cfg) < mrc_reward(&clean, w.poses(), &cfg));
        }
    }

    #[test]
    fn blank_views_fail() {
        let w = world();
        let blank: [Image; 4] = std::array::from_fn(|_| Image::filled(32, 32, 1.0));
        let cfg = MrcConfig::default();
        assert!(matches!(compute_mrc(&blank, w.poses(), &cfg), Err(Error::NoForeground)));
        assert_eq!(mrc_reward(&blank, w.poses(), &cfg), -1.0);
    }

    #[test]
    fn unnormalized_path_keeps_bboxes() {
        let w = world();
        let views = w.gt_views(PromptId(2));
        let a = compute_mrc(&views, w.poses(), &MrcConfig::default()).unwrap();
        let b = compute_mrc(&views, w.poses(), &MrcConfig { bbox_norm: false, ..Default::default() }).unwrap();
        assert_eq!(a.bboxes, b.bboxes);
        assert_ne!(a.score, b.score);
    }

    #[test]
    fn zero_intensity_is_undistorted() {
        let w = world();
        let cfg = MrcConfig::default();
        let c = distortion_experiment(&w, PromptId(0), DistortionKind::Patch, &[0.0], &cfg, 5).unwrap();
        let base = compute_mrc(&w.gt_views(PromptId(0)), w.poses(), &cfg).unwrap().score;
        assert_eq!(c.scores, vec![base]);
    }

    #[test]
    fn patch_curve_rises() {
        let w = world();
        let c = distortion_experiment(&w, PromptId(3), DistortionKind::Patch, &[0.0, 8.0, 16.0], &MrcConfig::default(), 5)
            .unwrap();
        assert!(c.is_monotone());
        assert!(c.scores[2] > c.scores[0]);
    }

    #[test]
    fn bad_intensities_rejected() {
        let w = world();
        let cfg = MrcConfig::default();
        for bad in [vec![], vec![1.0, 2.0], vec![0.0, 4.0, 4.0], vec![0.0, 2.5], vec![0.0, 40.0]] {
            let r = distortion_experiment(&w, PromptId(0), DistortionKind::Patch, &bad, &cfg, 0);
            assert!(matches!(r, Err(Error::InvalidIntensities(_))), "{bad:?}");
        }
        let empty = metric_comparison_report(&w, &[PromptId(0)], DistortionKind::Azimuth, &[], &cfg, 0);
        assert!(matches!(empty, Err(Error::InvalidIntensities(_))));
    }

    #[test]
    fn smoothness_statistic() {
        assert!(smoothness(&[0.0, 1.0, 2.0, 3.0]) < 1e-15);
        assert_eq!(smoothness(&[0.0, 1.0, 0.0]), 2.0);
        assert_eq!(smoothness(&[5.0, 5.0, 5.0]), 0.0);
        // scale and offset invariant
        let a = smoothness(&[0.1, 0.4, 0.5, 0.9]);
        let b = smoothness(&[3.0, 12.0, 15.0, 27.0]);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn report_is_deterministic_and_reuses_reconstructions() {
        let w = world();
        let cfg = MrcConfig::default();
        let xs = [0.0, 8.0];
        let a = metric_comparison_report(&w, &[PromptId(0)], DistortionKind::Patch, &xs, &cfg, 9).unwrap();
        let b = metric_comparison_report(&w, &[PromptId(0)], DistortionKind::Patch, &xs, &cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv(), b.to_csv());
        assert!(a.to_csv().starts_with("kind,intensity,score\n"));
        for m in MetricKind::ALL {
            let single = distortion_experiment(&w, PromptId(0), DistortionKind::Patch, &xs, &MrcConfig { metric: m, ..cfg.clone() }, 9)
                .unwrap();
            assert_eq!(a.curves[&m][0].scores, single.scores);
        }
    }
}
