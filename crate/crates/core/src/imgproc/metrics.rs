use serde::{Deserialize, Serialize};

use super::Image;
use crate::{Error, Result};

/// PSNR value reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 8;
const SSIM_STRIDE: usize = 4;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Image distance families. Similarities are negated so that larger always
/// means "more different".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MetricKind {
    L1,
    L2,
    PsnrNeg,
    SsimNeg,
    Msgd,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] =
        [MetricKind::L1, MetricKind::L2, MetricKind::PsnrNeg, MetricKind::SsimNeg, MetricKind::Msgd];

    /// Value of `d(a, a)`.
    pub fn minimum(self) -> f64 {
        match self {
            MetricKind::L1 | MetricKind::L2 | MetricKind::Msgd => 0.0,
            MetricKind::PsnrNeg => -PSNR_CAP_DB,
            MetricKind::SsimNeg => -1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::L1 => "l1",
            MetricKind::L2 => "l2",
            MetricKind::PsnrNeg => "psnr_neg",
            MetricKind::SsimNeg => "ssim_neg",
            MetricKind::Msgd => "msgd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn distance(self, a: &Image, b: &Image) -> Result<f64> {
        match self {
            MetricKind::Msgd => msgd_distance(a, b),
            k => pixel_distance(a, b, k),
        }
    }
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )))
    }
}

fn mean_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

fn mean_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Pixel-aligned distances. `kind` must not be [`MetricKind::Msgd`].
pub fn pixel_distance(a: &Image, b: &Image, kind: MetricKind) -> Result<f64> {
    check_dims(a, b)?;
    match kind {
        MetricKind::L1 => Ok(mean_abs(a.data(), b.data())),
        MetricKind::L2 => Ok(mean_sq(a.data(), b.data())),
        MetricKind::PsnrNeg => {
            let mse = mean_sq(a.data(), b.data());
            let psnr = if mse == 0.0 { PSNR_CAP_DB } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB) };
            Ok(-psnr)
        }
        MetricKind::SsimNeg => Ok(-mean_ssim(a, b)?),
        MetricKind::Msgd => Err(Error::InvalidConfig("msgd is not a pixel distance".into())),
    }
}

fn mean_ssim(a: &Image, b: &Image) -> Result<f64> {
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::TooSmall(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}")));
    }
    let n = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in (0..=h - SSIM_WINDOW).step_by(SSIM_STRIDE) {
        for x in (0..=w - SSIM_WINDOW).step_by(SSIM_STRIDE) {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in y..y + SSIM_WINDOW {
                for c in x..x + SSIM_WINDOW {
                    let (pa, pb) = (a.get(r, c), b.get(r, c));
                    sa += pa;
                    sb += pb;
                    saa += pa * pa;
                    sbb += pb * pb;
                    sab += pa * pb;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = saa / n - ma * ma;
            let vb = sbb / n - mb * mb;
            let cov = sab / n - ma * mb;
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// 2x2 box average; an odd trailing row or column is dropped.
pub(crate) fn downsample2(data: &[f64], w: usize, h: usize) -> (Vec<f64>, usize, usize) {
    let (nw, nh) = (w / 2, h / 2);
    let mut out = Vec::with_capacity(nw * nh);
    for r in 0..nh {
        for c in 0..nw {
            let i = 2 * r * w + 2 * c;
            out.push(0.25 * (data[i] + data[i + 1] + data[i + w] + data[i + w + 1]));
        }
    }
    (out, nw, nh)
}

/// Sum of |grad a - grad b| over central-difference gradients of interior
/// samples, plus the number of gradient entries.
fn gradient_abs_diff(a: &[f64], b: &[f64], w: usize, h: usize) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0usize;
    for r in 0..h {
        for c in 1..w - 1 {
            let i = r * w + c;
            let ga = 0.5 * (a[i + 1] - a[i - 1]);
            let gb = 0.5 * (b[i + 1] - b[i - 1]);
            sum += (ga - gb).abs();
            n += 1;
        }
    }
    for r in 1..h - 1 {
        for c in 0..w {
            let i = r * w + c;
            let ga = 0.5 * (a[i + w] - a[i - w]);
            let gb = 0.5 * (b[i + w] - b[i - w]);
            sum += (ga - gb).abs();
            n += 1;
        }
    }
    (sum, n)
}

/// Multi-scale gradient distance: mean absolute difference of
/// central-difference gradient maps at scales 1, 2 and 4, averaged over
/// scales. Flat offsets are invisible to it.
pub fn msgd_distance(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w / 4 < 4 || h / 4 < 4 {
        return Err(Error::TooSmall(format!("msgd needs 4x4 at the coarsest scale, got {w}x{h}")));
    }
    let mut da = a.data().to_vec();
    let mut db = b.data().to_vec();
    let (mut cw, mut ch) = (w, h);
    let mut total = 0.0;
    for scale in 0..3 {
        if scale > 0 {
            (da, _, _) = downsample2(&da, cw, ch);
            let next;
            (db, cw, next) = downsample2(&db, cw, ch);
            ch = next;
        }
        let (sum, n) = gradient_abs_diff(&da, &db, cw, ch);
        total += sum / n as f64;
    }
    Ok(total / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rand_image(w: usize, h: usize, seed: u64) -> Image {
        Image::from_fn(w, h, |r, c| crate::rng::uniform_at(seed, (r * w + c) as u64))
    }

    #[test]
    fn identity_minimums() {
        let a = rand_image(16, 16, 3);
        for k in MetricKind::ALL {
            assert_eq!(k.distance(&a, &a).unwrap(), k.minimum(), "{k}");
        }
    }

    #[test]
    fn l2_of_constant_extremes() {
        let z = Image::filled(8, 8, 0.0);
        let o = Image::filled(8, 8, 1.0);
        assert_eq!(pixel_distance(&z, &o, MetricKind::L2).unwrap(), 1.0);
        assert_eq!(pixel_distance(&z, &o, MetricKind::L1).unwrap(), 1.0);
        assert_eq!(pixel_distance(&z, &o, MetricKind::PsnrNeg).unwrap(), 0.0);
    }

    #[test]
    fn psnr_cap() {
        let a = rand_image(8, 8, 1);
        assert_eq!(pixel_distance(&a, &a, MetricKind::PsnrNeg).unwrap(), -100.0);
    }

    #[test]
    fn dimension_mismatch() {
        let a = Image::filled(8, 8, 0.5);
        let b = Image::filled(8, 9, 0.5);
        for k in MetricKind::ALL {
            assert!(matches!(k.distance(&a, &b), Err(Error::DimensionMismatch(_))));
        }
    }

    #[test]
    fn msgd_ignores_brightness() {
        let a = Image::filled(16, 16, 0.2);
        let b = Image::filled(16, 16, 0.8);
        assert_eq!(msgd_distance(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn msgd_too_small() {
        let a = Image::filled(8, 8, 0.2);
        assert!(matches!(msgd_distance(&a, &a), Err(Error::TooSmall(_))));
    }

    /// Straightforward re-evaluation of the definition with 2-D indexing.
    fn msgd_oracle(a: &Image, b: &Image) -> f64 {
        fn to_grid(img: &Image) -> Vec<Vec<f64>> {
            (0..img.height()).map(|r| (0..img.width()).map(|c| img.get(r, c)).collect()).collect()
        }
        fn down(g: &[Vec<f64>]) -> Vec<Vec<f64>> {
            (0..g.len() / 2)
                .map(|r| {
                    (0..g[0].len() / 2)
                        .map(|c| {
                            (g[2 * r][2 * c] + g[2 * r][2 * c + 1] + g[2 * r + 1][2 * c] + g[2 * r + 1][2 * c + 1])
                                / 4.0
                        })
                        .collect()
                })
                .collect()
        }
        let mut ga = to_grid(a);
        let mut gb = to_grid(b);
        let mut acc = 0.0;
        for s in 0..3 {
            if s > 0 {
                ga = down(&ga);
                gb = down(&gb);
            }
            let (h, w) = (ga.len(), ga[0].len());
            let mut diffs = Vec::new();
            for r in 0..h {
                for c in 1..w - 1 {
                    diffs.push(((ga[r][c + 1] - ga[r][c - 1]) / 2.0 - (gb[r][c + 1] - gb[r][c - 1]) / 2.0).abs());
                }
            }
            for r in 1..h - 1 {
                for c in 0..w {
                    diffs.push(((ga[r + 1][c] - ga[r - 1][c]) / 2.0 - (gb[r + 1][c] - gb[r - 1][c]) / 2.0).abs());
                }
            }
            acc += diffs.iter().sum::<f64>() / diffs.len() as f64;
        }
        acc / 3.0
    }

    #[test]
    fn msgd_step_edges_match_oracle() {
        let a = Image::from_fn(32, 32, |_, c| if c < 8 { 0.1 } else { 0.9 });
        let b = Image::from_fn(32, 32, |_, c| if c < 10 { 0.1 } else { 0.9 });
        let d = msgd_distance(&a, &b).unwrap();
        assert!(d > 0.0);
        assert!((d - msgd_oracle(&a, &b)).abs() < 1e-14);
    }

    #[test]
    fn ssim_drops_for_noise() {
        let a = rand_image(16, 16, 5);
        let b = rand_image(16, 16, 6);
        let d = pixel_distance(&a, &b, MetricKind::SsimNeg).unwrap();
        assert!(d > -1.0 && d < 1.0);
    }

    proptest! {
        #[test]
        fn distances_are_symmetric(sa in 0u64..1000, sb in 0u64..1000, w in 16usize..24, h in 16usize..24) {
            let a = rand_image(w, h, sa);
            let b = rand_image(w, h, sb + 5000);
            for k in MetricKind::ALL {
                prop_assert_eq!(k.distance(&a, &b).unwrap(), k.distance(&b, &a).unwrap());
            }
        }

        #[test]
        fn msgd_matches_oracle(sa in 0u64..1000, sb in 0u64..1000, w in 16usize..24, h in 16usize..24) {
            let a = rand_image(w, h, sa);
            let b = rand_image(w, h, sb + 5000);
            prop_assert!((msgd_distance(&a, &b).unwrap() - msgd_oracle(&a, &b)).abs() < 1e-12);
        }
    }
}
