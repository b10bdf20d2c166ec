//! Procedural voxel scenes, the orthographic emission renderer, the
//! canonical four-view rig and the controlled distortions used by the
//! metric experiments.

mod distort;
mod generate;
mod render;

pub use distort::{patch_distort, rotation_distort};
pub use generate::{generate_scene, generate_scene_scaled, Primitive, PrimitiveShape, SceneSpec};
pub use render::{render_multiview, render_view, tile_views, untile, Projector};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dense cube of densities in `[0, 1]`, x fastest, z slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelScene {
    resolution: usize,
    density: Vec<f64>,
}

impl VoxelScene {
    pub fn new(resolution: usize, density: Vec<f64>) -> Result<Self> {
        if resolution < 4 {
            return Err(Error::TooSmall(format!("scene resolution {resolution} < 4")));
        }
        if density.len() != resolution.pow(3) {
            return Err(Error::DimensionMismatch(format!(
                "density length {} for resolution {resolution}",
                density.len()
            )));
        }
        if density.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig("densities must lie in [0,1]".into()));
        }
        Ok(Self { resolution, density })
    }

    pub fn empty(resolution: usize) -> Self {
        assert!(resolution >= 4);
        Self { resolution, density: vec![0.0; resolution.pow(3)] }
    }

    /// Clamps every value into `[0, 1]`.
    pub fn from_clamped(resolution: usize, density: Vec<f64>) -> Result<Self> {
        Self::new(resolution, density.into_iter().map(crate::imgproc::clamp01_density).collect())
    }

    #[inline]
    pub fn resolution(&self) -> usize {
        self.resolution
    }

    #[inline]
    pub fn density(&self) -> &[f64] {
        &self.density
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.resolution + y) * self.resolution + x
    }

    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.index(x, y, z);
        self.density[i] = v.clamp(0.0, 1.0);
    }

    pub fn occupancy(&self) -> f64 {
        self.density.iter().filter(|&&v| v > 0.0).count() as f64 / self.density.len() as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.density.len());
        out.extend_from_slice(b"VOXS");
        out.extend_from_slice(&(self.resolution as u32).to_le_bytes());
        for v in &self.density {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[0..4] != b"VOXS" {
            return Err(Error::Format("missing VOXS magic".into()));
        }
        let res = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() != 8 * res.pow(3) {
            return Err(Error::Format(format!("scene body has {} bytes for resolution {res}", body.len())));
        }
        let density = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Self::new(res, density)
    }
}

/// Angles are kept on a 1e-9 degree lattice so that `a` and `a + 360`
/// normalize to the same value bit for bit.
const ANGLE_QUANTUM: f64 = 1e9;

fn quantize(deg: f64) -> f64 {
    (deg * ANGLE_QUANTUM).round() / ANGLE_QUANTUM
}

/// Orthographic viewpoint. Azimuth wraps into `[0, 360)`, elevation is
/// clamped into `[-90, 90]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    azimuth: f64,
    elevation: f64,
}

impl CameraPose {
    pub fn new(azimuth: f64, elevation: f64) -> Self {
        let mut az = quantize(azimuth.rem_euclid(360.0));
        if az >= 360.0 {
            az = 0.0;
        }
        let el = quantize(elevation.clamp(-90.0, 90.0));
        Self { azimuth: az, elevation: el }
    }

    pub fn azimuth(&self) -> f64 {
        self.azimuth
    }

    pub fn elevation(&self) -> f64 {
        self.elevation
    }

    pub fn rotated(&self, delta_az: f64, delta_el: f64) -> Self {
        Self::new(self.azimuth + delta_az, self.elevation + delta_el)
    }
}

/// Four poses plus the per-view raster size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRig {
    poses: [CameraPose; 4],
    view_res: usize,
}

impl ViewRig {
    pub const CANONICAL_AZIMUTHS: [f64; 4] = [0.0, 90.0, 180.0, 270.0];
    pub const CANONICAL_ELEVATION: f64 = 20.0;

    pub fn new(poses: [CameraPose; 4], view_res: usize) -> Result<Self> {
        if view_res < 16 || view_res % 2 != 0 {
            return Err(Error::InvalidConfig(format!("view_res must be even and >= 16, got {view_res}")));
        }
        Ok(Self { poses, view_res })
    }

    /// Azimuths 0/90/180/270 at 20 degrees elevation.
    pub fn canonical(view_res: usize) -> Result<Self> {
        let poses = Self::CANONICAL_AZIMUTHS.map(|az| CameraPose::new(az, Self::CANONICAL_ELEVATION));
        Self::new(poses, view_res)
    }

    pub fn poses(&self) -> &[CameraPose; 4] {
        &self.poses
    }

    pub fn view_res(&self) -> usize {
        self.view_res
    }
}

/// Index into the procedural prompt catalog. Each id seeds one scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PromptId(pub u64);

impl std::fmt::Display for PromptId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}
