use super::{CameraPose, ViewRig, VoxelScene};
use crate::imgproc::Image;
use crate::{Error, Result};

/// The linear part of the renderer for one pose: a sparse matrix mapping
/// voxel densities to per-pixel ray means. A rendered pixel is
/// `1 - (P g)[pixel]`.
///
/// Each pixel casts one ray through its center; the ray is sampled once per
/// voxel slab along depth and each sample reads the rotated grid with
/// trilinear weights (outside the grid reads 0).
#[derive(Debug, Clone)]
pub struct Projector {
    resolution: usize,
    view_res: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

impl Projector {
    pub fn new(resolution: usize, pose: CameraPose, view_res: usize) -> Self {
        let n = resolution as isize;
        let c = (resolution as f64 - 1.0) / 2.0;
        let s = resolution as f64 / view_res as f64;
        let (sa, ca) = pose.azimuth().to_radians().sin_cos();
        let (se, ce) = pose.elevation().to_radians().sin_cos();
        let inv_len = 1.0 / resolution as f64;

        let mut row_ptr = Vec::with_capacity(view_res * view_res + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut entries: Vec<(u32, f64)> = Vec::with_capacity(8 * resolution);
        row_ptr.push(0);
        for py in 0..view_res {
            let v = (py as f64 + 0.5) * s - 0.5 - c;
            for px in 0..view_res {
                let u = (px as f64 + 0.5) * s - 0.5 - c;
                entries.clear();
                for k in 0..resolution {
                    let w = k as f64 - c;
                    // Elevation about the screen horizontal, then azimuth about vertical.
                    let y1 = v * ce - w * se;
                    let w1 = v * se + w * ce;
                    let x = ca * u + sa * w1 + c;
                    let z = -sa * u + ca * w1 + c;
                    let y = y1 + c;
                    let (x0, y0, z0) = (x.floor(), y.floor(), z.floor());
                    let (fx, fy, fz) = (x - x0, y - y0, z - z0);
                    let (x0, y0, z0) = (x0 as isize, y0 as isize, z0 as isize);
                    for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
                        let zi = z0 + dz;
                        if wz == 0.0 || zi < 0 || zi >= n {
                            continue;
                        }
                        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                            let yi = y0 + dy;
                            if wy == 0.0 || yi < 0 || yi >= n {
                                continue;
                            }
                            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                                let xi = x0 + dx;
                                if wx == 0.0 || xi < 0 || xi >= n {
                                    continue;
                                }
                                let idx = ((zi * n + yi) * n + xi) as u32;
                                entries.push((idx, wz * wy * wx * inv_len));
                            }
                        }
                    }
                }
                entries.sort_by_key(|e| e.0);
                let mut last = u32::MAX;
                for &(idx, w) in &entries {
                    if idx == last {
                        *vals.last_mut().unwrap() += w;
                    } else {
                        cols.push(idx);
                        vals.push(w);
                        last = idx;
                    }
                }
                row_ptr.push(cols.len());
            }
        }
        Self { resolution, view_res, row_ptr, cols, vals }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn view_res(&self) -> usize {
        self.view_res
    }

    pub fn rows(&self) -> usize {
        self.view_res * self.view_res
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `out = P g` (ray means).
    pub fn apply(&self, grid: &[f64], out: &mut [f64]) {
        debug_assert_eq!(grid.len(), self.resolution.pow(3));
        for (r, o) in out.iter_mut().enumerate() {
            let (a, b) = (self.row_ptr[r], self.row_ptr[r + 1]);
            let mut acc = 0.0;
            for i in a..b {
                acc += self.vals[i] * grid[self.cols[i] as usize];
            }
            *o = acc;
        }
    }

    /// `out += Pᵀ y`.
    pub fn apply_adjoint_add(&self, y: &[f64], out: &mut [f64]) {
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for i in self.row_ptr[r]..self.row_ptr[r + 1] {
                out[self.cols[i] as usize] += self.vals[i] * yr;
            }
        }
    }

    /// Renders densities into an image: `1 - P g`, clamped.
    pub fn render(&self, grid: &[f64]) -> Image {
        let mut means = vec![0.0; self.rows()];
        self.apply(grid, &mut means);
        let data = means.into_iter().map(|m| 1.0 - m).collect();
        Image::from_clamped(self.view_res, self.view_res, data).expect("projector dimensions are valid")
    }
}

/// Orthographic emission render of `scene` from `pose`.
pub fn render_view(scene: &VoxelScene, pose: CameraPose, view_res: usize) -> Image {
    Projector::new(scene.resolution(), pose, view_res).render(scene.density())
}

/// Renders all four rig views and their 2x2 tile
/// (top-left, top-right, bottom-left, bottom-right = poses 0..3).
pub fn render_multiview(scene: &VoxelScene, rig: &ViewRig) -> ([Image; 4], Image) {
    let views = rig.poses().map(|p| render_view(scene, p, rig.view_res()));
    let tile = tile_views(&views).expect("rig views share one size");
    (views, tile)
}

pub fn tile_views(views: &[Image; 4]) -> Result<Image> {
    let n = views[0].width();
    if views.iter().any(|v| v.width() != n || v.height() != n) {
        return Err(Error::DimensionMismatch("tiled views must be equal squares".into()));
    }
    let side = 2 * n;
    let mut data = vec![0.0; side * side];
    for (i, v) in views.iter().enumerate() {
        let (oy, ox) = ((i / 2) * n, (i % 2) * n);
        for r in 0..n {
            data[(oy + r) * side + ox..(oy + r) * side + ox + n].copy_from_slice(&v.data()[r * n..(r + 1) * n]);
        }
    }
    Image::new(side, side, data)
}

pub fn untile(tile: &Image) -> Result<[Image; 4]> {
    let side = tile.width();
    if side != tile.height() || side % 2 != 0 {
        return Err(Error::DimensionMismatch(format!("tile must be an even square, got {}x{}", side, tile.height())));
    }
    let n = side / 2;
    let view = |i: usize| {
        let (oy, ox) = ((i / 2) * n, (i % 2) * n);
        let mut data = Vec::with_capacity(n * n);
        for r in 0..n {
            data.extend_from_slice(&tile.data()[(oy + r) * side + ox..(oy + r) * side + ox + n]);
        }
        Image::new(n, n, data).expect("sub-view of a valid tile")
    };
    Ok([view(0), view(1), view(2), view(3)])
}
