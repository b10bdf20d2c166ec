//! Procedural scene catalog. A prompt id fully determines its scene.

use rand::Rng;

use super::{render_multiview, PromptId, ViewRig, VoxelScene};
use crate::imgproc::{pixel_distance, MetricKind};
use crate::rng::{stream, tag};

const MIN_OCCUPANCY: f64 = 0.02;
const MAX_OCCUPANCY: f64 = 0.60;
/// Primitives stay inside this fraction of the grid side around the center,
/// so no rotation of the rig ever clips them.
const BOUNDING_RADIUS: f64 = 0.47;
const MAX_ATTEMPTS: u64 = 256;
const SUPERSAMPLE: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PrimitiveShape {
    /// Half extents along x, y, z.
    Box([f64; 3]),
    Sphere(f64),
    /// Vertical (y) axis: radius, half height.
    Cylinder(f64, f64),
}

/// One solid, in grid-relative units (1.0 = grid side), centered offsets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: PrimitiveShape,
    pub center: [f64; 3],
    pub intensity: f64,
}

impl Primitive {
    fn bounding_radius(&self) -> f64 {
        match self.shape {
            PrimitiveShape::Box([a, b, c]) => (a * a + b * b + c * c).sqrt(),
            PrimitiveShape::Sphere(r) => r,
            PrimitiveShape::Cylinder(r, h) => (r * r + h * h).sqrt(),
        }
    }

    fn contains(&self, p: [f64; 3], scale: f64) -> bool {
        let d = [
            p[0] - self.center[0] * scale,
            p[1] - self.center[1] * scale,
            p[2] - self.center[2] * scale,
        ];
        match self.shape {
            PrimitiveShape::Box(h) => (0..3).all(|i| d[i].abs() <= h[i] * scale),
            PrimitiveShape::Sphere(r) => d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= (r * scale).powi(2),
            PrimitiveShape::Cylinder(r, h) => {
                d[0] * d[0] + d[2] * d[2] <= (r * scale).powi(2) && d[1].abs() <= h * scale
            }
        }
    }
}

/// The primitive list behind a prompt's scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub prompt: PromptId,
    pub attempt: u64,
    pub primitives: Vec<Primitive>,
}

impl SceneSpec {
    fn sample(prompt: PromptId, attempt: u64) -> Self {
        let mut rng = stream(&[tag::SCENE, prompt.0, attempt]);
        let count = rng.random_range(1..=4);
        let primitives = (0..count)
            .map(|_| {
                let shape = match rng.random_range(0..3) {
                    0 => PrimitiveShape::Box([
                        rng.random_range(0.08..0.26),
                        rng.random_range(0.08..0.26),
                        rng.random_range(0.08..0.26),
                    ]),
                    1 => PrimitiveShape::Sphere(rng.random_range(0.10..0.28)),
                    _ => PrimitiveShape::Cylinder(rng.random_range(0.07..0.22), rng.random_range(0.10..0.30)),
                };
                let mut prim = Primitive { shape, center: [0.0; 3], intensity: rng.random_range(0.3..=1.0) };
                let slack = (BOUNDING_RADIUS - prim.bounding_radius()).max(0.0);
                // Rejection-sample an offset inside the ball of radius `slack`.
                loop {
                    let c = [
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                        rng.random_range(-1.0..1.0),
                    ];
                    if c[0] * c[0] + c[1] * c[1] + c[2] * c[2] <= 1.0 {
                        prim.center = c.map(|v| v * slack);
                        break;
                    }
                }
                prim
            })
            .collect();
        Self { prompt, attempt, primitives }
    }

    /// Voxelizes with `SUPERSAMPLE^3` samples per voxel; overlapping
    /// primitives take the maximum intensity. `scale` shrinks every
    /// primitive about the grid center.
    pub fn rasterize(&self, resolution: usize, scale: f64) -> VoxelScene {
        let n = resolution as f64;
        let ss = SUPERSAMPLE as f64;
        let mut density = vec![0.0; resolution.pow(3)];
        for z in 0..resolution {
            for y in 0..resolution {
                for x in 0..resolution {
                    let mut acc = 0.0;
                    for sz in 0..SUPERSAMPLE {
                        for sy in 0..SUPERSAMPLE {
                            for sx in 0..SUPERSAMPLE {
                                let p = [
                                    (x as f64 + (sx as f64 + 0.5) / ss) / n - 0.5,
                                    (y as f64 + (sy as f64 + 0.5) / ss) / n - 0.5,
                                    (z as f64 + (sz as f64 + 0.5) / ss) / n - 0.5,
                                ];
                                acc += self
                                    .primitives
                                    .iter()
                                    .filter(|pr| pr.contains(p, scale))
                                    .map(|pr| pr.intensity)
                                    .fold(0.0, f64::max);
                            }
                        }
                    }
                    density[(z * resolution + y) * resolution + x] = acc / ss.powi(3);
                }
            }
        }
        VoxelScene::new(resolution, density).expect("rasterized densities are in range")
    }

    /// Generation contract: occupancy within bounds and four pairwise
    /// distinct canonical views.
    fn acceptable(&self, resolution: usize) -> Option<VoxelScene> {
        let scene = self.rasterize(resolution, 1.0);
        let occ = scene.occupancy();
        if !(MIN_OCCUPANCY..=MAX_OCCUPANCY).contains(&occ) {
            return None;
        }
        let rig = ViewRig::canonical((2 * resolution).max(16)).ok()?;
        let (views, _) = render_multiview(&scene, &rig);
        for i in 0..4 {
            for j in i + 1..4 {
                if pixel_distance(&views[i], &views[j], MetricKind::L1).ok()? < 1e-4 {
                    return None;
                }
            }
        }
        Some(scene)
    }

    /// First acceptable attempt for `prompt` at `resolution`.
    pub fn for_prompt(prompt: PromptId, resolution: usize) -> Self {
        (0..MAX_ATTEMPTS)
            .map(|a| Self::sample(prompt, a))
            .find(|s| s.acceptable(resolution).is_some())
            .unwrap_or_else(|| {
                // Fallback: a single off-center box always meets the contract.
                Self {
                    prompt,
                    attempt: MAX_ATTEMPTS,
                    primitives: vec![Primitive {
                        shape: PrimitiveShape::Box([0.2, 0.15, 0.1]),
                        center: [0.1, 0.05, -0.08],
                        intensity: 0.8,
                    }],
                }
            })
    }
}

/// Deterministic scene for `prompt`: 1 to 4 solid primitives.
pub fn generate_scene(prompt: PromptId, resolution: usize) -> VoxelScene {
    assert!(resolution >= 4, "scene resolution must be >= 4");
    SceneSpec::for_prompt(prompt, resolution).rasterize(resolution, 1.0)
}

/// The same primitives as [`generate_scene`], scaled about the grid center.
pub fn generate_scene_scaled(prompt: PromptId, resolution: usize, scale: f64) -> VoxelScene {
    assert!(resolution >= 4, "scene resolution must be >= 4");
    SceneSpec::for_prompt(prompt, resolution).rasterize(resolution, scale)
}
