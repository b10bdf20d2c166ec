use super::{render_view, CameraPose, VoxelScene};
use crate::imgproc::{clamp01, Image};
use crate::rng::{hash_keys, tag, uniform_at};
use crate::{Error, Result};

fn box_blur3(data: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            let mut n = 0.0;
            for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                    acc += data[rr * w + cc];
                    n += 1.0;
                }
            }
            out[r * w + c] = acc / n;
        }
    }
    out
}

/// Replaces the centered `size x size` patch with a 50/50 blend of the
/// original content and smoothed noise.
///
/// The noise field covers the whole image and is addressed by absolute pixel
/// position, so the patch for a larger size agrees with the patch for a
/// smaller size on their overlap.
pub fn patch_distort(img: &Image, size: usize, seed: u64) -> Result<Image> {
    let (w, h) = (img.width(), img.height());
    if size > w.min(h) {
        return Err(Error::SizeTooLarge { size, side: w.min(h) });
    }
    if size == 0 {
        return Ok(img.clone());
    }
    let key = hash_keys(&[tag::PATCH, seed]);
    let noise: Vec<f64> = (0..w * h).map(|i| uniform_at(key, i as u64)).collect();
    let noise = box_blur3(&box_blur3(&noise, w, h), w, h);
    let (top, left) = ((h - size) / 2, (w - size) / 2);
    let mut data = img.data().to_vec();
    for r in top..top + size {
        for c in left..left + size {
            let i = r * w + c;
            data[i] = clamp01(0.5 * data[i] + 0.5 * noise[i]);
        }
    }
    Image::new(w, h, data)
}

/// Renders from the rotated pose; callers keep labelling the result with the
/// original pose.
pub fn rotation_distort(
    scene: &VoxelScene,
    pose: CameraPose,
    delta_az: f64,
    delta_el: f64,
    view_res: usize,
) -> Image {
    render_view(scene, pose.rotated(delta_az, delta_el), view_res)
}
