//! Grayscale images, foreground detection, square bounding boxes and the
//! image distances used by the consistency metric.
//!
//! Intensities live in `[0, 1]` with `1.0` meaning white background.

mod io;
mod metrics;

pub use io::{read_png, read_raw, write_png, write_raw, decode_raw, encode_raw};
pub use metrics::{msgd_distance, pixel_distance, MetricKind, PSNR_CAP_DB};

use crate::{Error, Result};

/// Default foreground threshold (16/255).
pub const DEFAULT_TAU: f64 = 0.0625;

/// Row-major grayscale raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    /// Validating constructor. Every value must be finite and in `[0, 1]`.
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!("zero-sized image {width}x{height}")));
        }
        if data.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "data length {} does not match {width}x{height}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidImage(format!("intensity {} at index {i} outside [0,1]", data[i])));
        }
        Ok(Self { width, height, data })
    }

    /// Builds an image from arbitrary values, clamping into `[0, 1]`.
    /// NaN maps to background.
    pub fn from_clamped(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        let data = data.into_iter().map(clamp01).collect();
        Self::new(width, height, data)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0);
        Self { width, height, data: vec![clamp01(value); width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0);
        let mut data = Vec::with_capacity(width * height);
        for row in 0..height {
            for col in 0..width {
                data.push(clamp01(f(row, col)));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }
}

#[inline]
pub(crate) fn clamp01(v: f64) -> f64 {
    if v.is_nan() {
        1.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

#[inline]
pub(crate) fn clamp01_density(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Boolean foreground mask with the dimensions of its source image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }
}

/// A pixel is foreground when it is darker than `1 - tau`.
pub fn foreground_mask(img: &Image, tau: f64) -> Mask {
    let cut = 1.0 - tau;
    Mask {
        width: img.width,
        height: img.height,
        bits: img.data.iter().map(|&v| v < cut).collect(),
    }
}

/// Inclusive square pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct SquareBbox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl SquareBbox {
    pub fn side(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn full(img: &Image) -> Option<Self> {
        (img.width == img.height).then(|| Self {
            x_min: 0,
            y_min: 0,
            x_max: img.width - 1,
            y_max: img.height - 1,
        })
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x_min <= self.x_max
            && self.y_min <= self.y_max
            && self.x_max - self.x_min == self.y_max - self.y_min
            && self.x_max < width
            && self.y_max < height
    }
}

/// Expands `[lo, hi]` to length `side`, centered, biased toward smaller
/// coordinates when the extra length is odd, then shifted into `[0, dim)`.
fn expand_axis(lo: usize, hi: usize, side: usize, dim: usize) -> usize {
    let len = hi - lo + 1;
    let extra = side - len;
    let ideal = lo as isize - extra.div_ceil(2) as isize;
    ideal.clamp(0, (dim - side) as isize) as usize
}

/// Smallest square containing the tight foreground rectangle.
pub fn compute_square_bbox(img: &Image, tau: f64) -> Result<SquareBbox> {
    let mask = foreground_mask(img, tau);
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for row in 0..mask.height {
        for col in 0..mask.width {
            if mask.get(row, col) {
                r0 = r0.min(row);
                r1 = r1.max(row);
                c0 = c0.min(col);
                c1 = c1.max(col);
            }
        }
    }
    if r0 == usize::MAX {
        return Err(Error::NoForeground);
    }
    let side = (r1 - r0 + 1).max(c1 - c0 + 1);
    if side > img.width.min(img.height) {
        return Err(Error::BboxOutOfBounds((c0, r0, c1, r1), img.width, img.height));
    }
    let y_min = expand_axis(r0, r1, side, img.height);
    let x_min = expand_axis(c0, c1, side, img.width);
    Ok(SquareBbox { x_min, y_min, x_max: x_min + side - 1, y_max: y_min + side - 1 })
}

/// Crops `bbox` out of `img` and bilinearly resamples it to `res x res`
/// using pixel-center alignment.
pub fn crop_and_resize(img: &Image, bbox: SquareBbox, res: usize) -> Result<Image> {
    if !bbox.fits(img.width, img.height) {
        return Err(Error::BboxOutOfBounds(
            (bbox.x_min, bbox.y_min, bbox.x_max, bbox.y_max),
            img.width,
            img.height,
        ));
    }
    if res < 2 {
        return Err(Error::TooSmall(format!("resize resolution {res} < 2")));
    }
    let side = bbox.side();
    let scale = side as f64 / res as f64;
    let last = (side - 1) as f64;
    // Per-axis source index pairs and weights are shared by both axes.
    let taps: Vec<(usize, usize, f64)> = (0..res)
        .map(|i| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(side - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect();
    let mut out = Vec::with_capacity(res * res);
    for &(r0, r1, fy) in &taps {
        for &(c0, c1, fx) in &taps {
            let p = |r: usize, c: usize| img.get(bbox.y_min + r, bbox.x_min + c);
            let top = p(r0, c0) * (1.0 - fx) + p(r0, c1) * fx;
            let bot = p(r1, c0) * (1.0 - fx) + p(r1, c1) * fx;
            out.push(clamp01(top * (1.0 - fy) + bot * fy));
        }
    }
    Image::new(res, res, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn white(n: usize) -> Image {
        Image::filled(n, n, 1.0)
    }

    fn with_pixels(n: usize, pixels: &[(usize, usize)], v: f64) -> Image {
        Image::from_fn(n, n, |r, c| if pixels.contains(&(r, c)) { v } else { 1.0 })
    }

    #[test]
    fn constructor_rejects_out_of_range() {
        assert!(Image::new(2, 1, vec![0.0, 1.5]).is_err());
        assert!(Image::new(2, 1, vec![0.0]).is_err());
        assert!(Image::new(0, 1, vec![]).is_err());
        assert!(Image::new(1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn mask_all_white_is_empty() {
        assert!(!foreground_mask(&white(8), 0.0625).any());
    }

    #[test]
    fn mask_single_pixel() {
        let m = foreground_mask(&with_pixels(8, &[(3, 5)], 0.0), 0.0625);
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(m.get(r, c), (r, c) == (3, 5));
            }
        }
    }

    #[test]
    fn mask_threshold_is_strict() {
        let m = foreground_mask(&with_pixels(8, &[(0, 0)], 0.95), 0.0625);
        assert!(!m.any());
    }

    #[test]
    fn bbox_requires_foreground() {
        assert!(matches!(compute_square_bbox(&white(8), 0.0625), Err(Error::NoForeground)));
    }

    #[test]
    fn bbox_point() {
        let b = compute_square_bbox(&with_pixels(8, &[(3, 5)], 0.0), 0.0625).unwrap();
        assert_eq!(b, SquareBbox { x_min: 5, y_min: 3, x_max: 5, y_max: 3 });
    }

    /// Enumerates every square of the given side containing the rectangle and
    /// keeps the one whose center is closest to the rectangle center.
    fn brute_force_bbox(n: usize, rows: (usize, usize), cols: (usize, usize)) -> SquareBbox {
        let side = (rows.1 - rows.0 + 1).max(cols.1 - cols.0 + 1);
        let mut best: Option<(i64, i64, SquareBbox)> = None;
        for y in 0..=(n - side) {
            for x in 0..=(n - side) {
                if y > rows.0 || y + side - 1 < rows.1 || x > cols.0 || x + side - 1 < cols.1 {
                    continue;
                }
                // Twice the center offset, per axis, keeps everything integral.
                let dy = (2 * y as i64 + side as i64 - 1 - (rows.0 + rows.1) as i64).abs();
                let dx = (2 * x as i64 + side as i64 - 1 - (cols.0 + cols.1) as i64).abs();
                let b = SquareBbox { x_min: x, y_min: y, x_max: x + side - 1, y_max: y + side - 1 };
                let better = match &best {
                    None => true,
                    Some((by, bx, _)) => (dy, dx) < (*by, *bx),
                };
                if better {
                    best = Some((dy, dx, b));
                }
            }
        }
        best.unwrap().2
    }

    #[test]
    fn bbox_matches_brute_force_example() {
        let img = with_pixels(16, &[(1, 1), (2, 6)], 0.0);
        let b = compute_square_bbox(&img, 0.0625).unwrap();
        assert_eq!(b.side(), 6);
        assert_eq!(b, brute_force_bbox(16, (1, 2), (1, 6)));
    }

    #[test]
    fn bbox_matches_brute_force_exhaustive_small() {
        let n = 9;
        for r0 in 0..n {
            for r1 in r0..n {
                for c0 in (0..n).step_by(2) {
                    for c1 in (c0..n).step_by(3) {
                        let img = with_pixels(n, &[(r0, c0), (r1, c1)], 0.2);
                        let b = compute_square_bbox(&img, 0.0625).unwrap();
                        assert_eq!(b, brute_force_bbox(n, (r0, r1), (c0, c1)), "{r0} {r1} {c0} {c1}");
                    }
                }
            }
        }
    }

    #[test]
    fn crop_uniform_stays_uniform() {
        let img = Image::filled(10, 10, 0.4);
        let b = SquareBbox { x_min: 2, y_min: 1, x_max: 7, y_max: 6 };
        for res in [2, 3, 7, 16] {
            let out = crop_and_resize(&img, b, res).unwrap();
            assert!(out.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));
        }
    }

    #[test]
    fn crop_identity_is_bit_exact() {
        let img = Image::from_fn(12, 12, |r, c| ((r * 7 + c * 3) % 11) as f64 / 10.0);
        let out = crop_and_resize(&img, SquareBbox::full(&img).unwrap(), 12).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn crop_checkerboard_center() {
        let img = Image::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = crop_and_resize(&img, SquareBbox::full(&img).unwrap(), 3).unwrap();
        assert_eq!(out.get(1, 1), 0.5);
    }

    #[test]
    fn crop_rejects_outside_box() {
        let img = white(8);
        let b = SquareBbox { x_min: 4, y_min: 4, x_max: 8, y_max: 8 };
        assert!(matches!(crop_and_resize(&img, b, 4), Err(Error::BboxOutOfBounds(..))));
    }
}
