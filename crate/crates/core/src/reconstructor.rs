//! Sparse-view voxel reconstruction by regularized linear least squares.
//!
//! The renderer is affine in the densities (`view = 1 - P g`), so fitting a
//! grid to four views is the problem
//!
//! ```text
//! min_g  Σ_v ‖P_v g − (1 − view_v)‖² + λ‖g‖²
//! ```
//!
//! solved on the normal equations `(PᵀP + λI) g = Pᵀ(1 − views)` with the
//! conjugate-residual member of the conjugate-gradient family, whose
//! residual norm is non-increasing. The grid is clamped to `[0, 1]` after
//! the solve.

use serde::{Deserialize, Serialize};

use crate::imgproc::Image;
use crate::sceneworld::{render_view, CameraPose, Projector, VoxelScene};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    pub lambda_reg: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self { lambda_reg: 1e-3, max_iters: 200, tol: 1e-8 }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_reg > 0.0) || self.max_iters == 0 || !(self.tol > 0.0) {
            return Err(Error::InvalidConfig(format!("invalid reconstruction config {self:?}")));
        }
        Ok(())
    }
}

/// Solver report. Hitting `max_iters` is not an error; `converged` is
/// false instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconDiagnostics {
    pub iterations: usize,
    /// ‖b − Mg‖ / ‖b‖ on the normal equations at exit.
    pub final_residual: f64,
    pub converged: bool,
    /// Normal-equation residual norm after each iteration (index 0 = start).
    pub residual_history: Vec<f64>,
    /// Data term ‖P g − y‖² of the unclamped solution.
    pub data_residual: f64,
    /// Full regularized objective of the unclamped solution.
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub scene: VoxelScene,
    pub unclamped: Vec<f64>,
    pub diagnostics: ReconDiagnostics,
}

/// The stacked four-view linear operator `A = [P_0; P_1; P_2; P_3]`.
#[derive(Debug, Clone)]
pub struct RenderOperator {
    projectors: Vec<Projector>,
    resolution: usize,
}

impl RenderOperator {
    pub fn new(poses: &[CameraPose], resolution: usize, view_res: usize) -> Self {
        let projectors = poses.iter().map(|&p| Projector::new(resolution, p, view_res)).collect();
        Self { projectors, resolution }
    }

    pub fn cols(&self) -> usize {
        self.resolution.pow(3)
    }

    pub fn rows(&self) -> usize {
        self.projectors.iter().map(Projector::rows).sum()
    }

    pub fn apply(&self, grid: &[f64], out: &mut [f64]) {
        let mut off = 0;
        for p in &self.projectors {
            p.apply(grid, &mut out[off..off + p.rows()]);
            off += p.rows();
        }
    }

    pub fn apply_adjoint(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut off = 0;
        for p in &self.projectors {
            p.apply_adjoint_add(&y[off..off + p.rows()], out);
            off += p.rows();
        }
    }

    /// `out = (AᵀA + λI) g`, using `scratch` (length `rows()`).
    fn normal(&self, g: &[f64], lambda: f64, scratch: &mut [f64], out: &mut [f64]) {
        self.apply(g, scratch);
        self.apply_adjoint(scratch, out);
        for (o, gi) in out.iter_mut().zip(g) {
            *o += lambda * gi;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_inputs(views: &[Image], poses: &[CameraPose]) -> Result<usize> {
    if views.len() != poses.len() || views.is_empty() {
        return Err(Error::DimensionMismatch(format!("{} views for {} poses", views.len(), poses.len())));
    }
    let n = views[0].width();
    if views.iter().any(|v| v.width() != n || v.height() != n) {
        return Err(Error::DimensionMismatch("views must be squares of one size".into()));
    }
    for i in 0..poses.len() {
        for j in i + 1..poses.len() {
            if poses[i] == poses[j] {
                return Err(Error::PoseDegeneracy);
            }
        }
    }
    Ok(n)
}

/// Fits a `resolution³` grid to the views.
pub fn reconstruct(
    views: &[Image; 4],
    poses: &[CameraPose; 4],
    resolution: usize,
    cfg: &ReconConfig,
) -> Result<Reconstruction> {
    cfg.validate()?;
    if resolution < 4 {
        return Err(Error::TooSmall(format!("scene resolution {resolution} < 4")));
    }
    let view_res = check_inputs(views, poses)?;
    let op = RenderOperator::new(poses, resolution, view_res);
    let target: Vec<f64> = views.iter().flat_map(|v| v.data().iter().map(|p| 1.0 - p)).collect();
    solve(&op, &target, cfg)
}

/// Conjugate residual iterations on the regularized normal equations.
pub fn solve(op: &RenderOperator, target: &[f64], cfg: &ReconConfig) -> Result<Reconstruction> {
    let n = op.cols();
    let lambda = cfg.lambda_reg;
    let mut scratch = vec![0.0; op.rows()];
    let mut b = vec![0.0; n];
    op.apply_adjoint(target, &mut b);
    let b_norm = dot(&b, &b).sqrt();

    let mut x = vec![0.0; n];
    let mut history = vec![b_norm];
    let mut iterations = 0;
    let mut converged = b_norm == 0.0;

    if !converged {
        let mut r = b.clone();
        let mut ar = vec![0.0; n];
        op.normal(&r, lambda, &mut scratch, &mut ar);
        let mut p = r.clone();
        let mut ap = ar.clone();
        let mut r_ar = dot(&r, &ar);
        while iterations < cfg.max_iters {
            let ap_ap = dot(&ap, &ap);
            if ap_ap == 0.0 {
                break;
            }
            let alpha = r_ar / ap_ap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            iterations += 1;
            let r_norm = dot(&r, &r).sqrt();
            history.push(r_norm);
            if r_norm <= cfg.tol * b_norm {
                converged = true;
                break;
            }
            op.normal(&r, lambda, &mut scratch, &mut ar);
            let r_ar_new = dot(&r, &ar);
            let beta = r_ar_new / r_ar;
            r_ar = r_ar_new;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
                ap[i] = ar[i] + beta * ap[i];
            }
        }
    }

    op.apply(&x, &mut scratch);
    let data_residual: f64 = scratch.iter().zip(target).map(|(a, y)| (a - y) * (a - y)).sum();
    let objective = data_residual + lambda * dot(&x, &x);
    let final_residual = if b_norm == 0.0 { 0.0 } else { history.last().copied().unwrap_or(0.0) / b_norm };
    let scene = VoxelScene::from_clamped(op.resolution, x.clone())?;
    Ok(Reconstruction {
        scene,
        unclamped: x,
        diagnostics: ReconDiagnostics {
            iterations,
            final_residual,
            converged,
            residual_history: history,
            data_residual,
            objective,
        },
    })
}

/// Renders `grid` at each pose; identical to calling `render_view` per pose.
pub fn rerender(grid: &VoxelScene, poses: &[CameraPose; 4], view_res: usize) -> [Image; 4] {
    poses.map(|p| render_view(grid, p, view_res))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgproc::{pixel_distance, MetricKind};
    use crate::sceneworld::{generate_scene, patch_distort, render_multiview, PromptId, ViewRig};

    fn rig() -> ViewRig {
        ViewRig::canonical(32).unwrap()
    }

    #[test]
    fn white_views_give_empty_grid() {
        let views = [0, 1, 2, 3].map(|_| Image::filled(32, 32, 1.0));
        let r = reconstruct(&views, rig().poses(), 16, &ReconConfig::default()).unwrap();
        assert!(r.scene.density().iter().all(|&v| v == 0.0));
        assert!(r.diagnostics.converged);
    }

    #[test]
    fn duplicate_poses_rejected() {
        let views = [0, 1, 2, 3].map(|_| Image::filled(32, 32, 1.0));
        let p = CameraPose::new(0.0, 20.0);
        let poses = [p, p, CameraPose::new(90.0, 20.0), CameraPose::new(180.0, 20.0)];
        assert!(matches!(reconstruct(&views, &poses, 16, &ReconConfig::default()), Err(Error::PoseDegeneracy)));
    }

    #[test]
    fn mismatched_views_rejected() {
        let mut views = [0, 1, 2, 3].map(|_| Image::filled(32, 32, 1.0));
        views[2] = Image::filled(16, 16, 1.0);
        assert!(matches!(
            reconstruct(&views, rig().poses(), 16, &ReconConfig::default()),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn rerender_is_render_view() {
        let s = generate_scene(PromptId(1), 16);
        let r = rig();
        let (views, _) = render_multiview(&s, &r);
        assert_eq!(rerender(&s, r.poses(), 32), views);
        let empty = rerender(&VoxelScene::empty(16), r.poses(), 32);
        assert!(empty.iter().all(|v| v.data().iter().all(|&p| p == 1.0)));
    }

    #[test]
    fn consistent_views_are_reproduced() {
        let r = rig();
        for p in 0..4 {
            let (views, _) = render_multiview(&generate_scene(PromptId(p), 16), &r);
            let rec = reconstruct(&views, r.poses(), 16, &ReconConfig::default()).unwrap();
            let again = rerender(&rec.scene, r.poses(), 32);
            for (a, b) in views.iter().zip(&again) {
                assert!(pixel_distance(a, b, MetricKind::L2).unwrap() <= 5e-3);
            }
        }
    }

    #[test]
    fn residual_is_monotone() {
        let r = rig();
        let (views, _) = render_multiview(&generate_scene(PromptId(7), 16), &r);
        let rec = reconstruct(&views, r.poses(), 16, &ReconConfig::default()).unwrap();
        for w in rec.diagnostics.residual_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn adjoint_identity() {
        let r = rig();
        let op = RenderOperator::new(r.poses(), 16, 32);
        for seed in 0..3u64 {
            let g: Vec<f64> = (0..op.cols()).map(|i| crate::rng::uniform_at(seed, i as u64)).collect();
            let y: Vec<f64> =
                (0..op.rows()).map(|i| crate::rng::uniform_at(seed + 100, i as u64) - 0.5).collect();
            let mut ag = vec![0.0; op.rows()];
            op.apply(&g, &mut ag);
            let mut aty = vec![0.0; op.cols()];
            op.apply_adjoint(&y, &mut aty);
            assert!((dot(&ag, &y) - dot(&g, &aty)).abs() < 1e-9);
        }
    }

    #[test]
    fn inconsistency_raises_objective() {
        let r = rig();
        for p in 0..4 {
            let (mut views, _) = render_multiview(&generate_scene(PromptId(p), 16), &r);
            let clean = reconstruct(&views, r.poses(), 16, &ReconConfig::default()).unwrap();
            views[3] = patch_distort(&views[3], 8, 0).unwrap();
            let dirty = reconstruct(&views, r.poses(), 16, &ReconConfig::default()).unwrap();
            assert!(dirty.diagnostics.objective > clean.diagnostics.objective, "prompt {p}");
        }
    }
}
