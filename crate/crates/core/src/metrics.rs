//! Image fidelity, depth accuracy and multi-view reprojection metrics.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::camera::CameraPose;
use crate::raster::{DepthMap, Image};
use crate::{Error, Result};

pub const PSNR_CAP: f64 = 99.0;

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height || a.data.len() != b.data.len() {
        return Err(Error::ShapeMismatch {
            expected: a.data.len(),
            actual: b.data.len(),
        });
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    Ok(s / a.data.len().max(1) as f64)
}

/// `10 log10(1 / MSE)` for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * libm::log10(1.0 / mse)).min(PSNR_CAP)
}

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) * 0.5;
    let w: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - c;
            libm::exp(-x * x / (2.0 * sigma * sigma))
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filter of a single-channel `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut tmp = alloc::vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            tmp[r * ow + c] = (0..n).map(|i| k[i] * plane[r * w + c + i]).sum();
        }
    }
    let mut out = alloc::vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| k[i] * tmp[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Windowed SSIM (11×11 Gaussian, σ = 1.5, valid region) averaged over the
/// map and the three channels. Images smaller than the window use the largest
/// odd window that fits.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = (a.height, a.width);
    let mut size = 11.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    if size == 0 {
        return Err(Error::InvalidArgument("image too small for SSIM".into()));
    }
    let k = gaussian_window(size, 1.5);
    let mut total = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = (0..h * w).map(|i| a.data[i * 3 + ch] as f64).collect();
        let y: Vec<f64> = (0..h * w).map(|i| b.data[i * 3 + ch] as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, h, w, &k);
        let my = filter_valid(&y, h, w, &k);
        let sxx = filter_valid(&xx, h, w, &k);
        let syy = filter_valid(&yy, h, w, &k);
        let sxy = filter_valid(&xy, h, w, &k);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / 3.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthErrors {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub delta_125: f64,
    /// Scale applied to the prediction before scoring.
    pub scale: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Depth errors over `mask`. With `align`, the prediction is first scaled by
/// `median(gt) / median(pred)` on the mask.
pub fn depth_metrics(pred: &[f32], gt: &[f32], mask: &[bool], align: bool) -> Result<DepthErrors> {
    if pred.len() != gt.len() || mask.len() != gt.len() {
        return Err(Error::ShapeMismatch {
            expected: gt.len(),
            actual: pred.len().min(mask.len()),
        });
    }
    let idx: Vec<usize> = (0..gt.len()).filter(|&i| mask[i]).collect();
    if idx.is_empty() {
        return Err(Error::EmptyMask);
    }
    let p: Vec<f64> = idx.iter().map(|&i| (pred[i] as f64).max(1e-6)).collect();
    let g: Vec<f64> = idx.iter().map(|&i| gt[i] as f64).collect();
    let scale = if align {
        median(g.clone()) / median(p.clone())
    } else {
        1.0
    };
    let n = idx.len() as f64;
    let (mut abs_rel, mut sq_rel, mut sq, mut inliers) = (0.0, 0.0, 0.0, 0usize);
    for (pi, gi) in p.iter().zip(&g) {
        let pi = pi * scale;
        let d = pi - gi;
        abs_rel += d.abs() / gi;
        sq_rel += d * d / gi;
        sq += d * d;
        if (pi / gi).max(gi / pi) < 1.25 {
            inliers += 1;
        }
    }
    Ok(DepthErrors {
        abs_rel: abs_rel / n,
        sq_rel: sq_rel / n,
        rmse: libm::sqrt(sq / n),
        delta_125: inliers as f64 / n,
        scale,
    })
}

/// Relative depth disagreement above which a reprojected pixel is treated as
/// not co-visible.
pub const COVISIBILITY_TOL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reprojection {
    /// Mean `i → j → i` pixel cycle distance over co-visible pixels.
    pub mean_cycle_px: f64,
    /// `mean_cycle_px` divided by the image diagonal.
    pub normalized: f64,
    /// Mean relative depth residual at the landing pixel over every pixel
    /// that landed inside the other view.
    pub mean_depth_residual: f64,
    pub covisible: usize,
}

impl Reprojection {
    /// Scalar consistency score: diagonal-normalized cycle distance plus the
    /// mean relative depth residual. Zero for perfectly consistent geometry.
    pub fn score(&self) -> f64 {
        self.normalized + self.mean_depth_residual
    }
}

/// Multi-view reprojection consistency of per-view depth maps under the given
/// cameras.
///
/// For every ordered view pair `(i, j)`, each valid pixel of `i` is lifted
/// with `depth_i`, projected into `j`, and `depth_j` is read at the landing
/// point (bilinear in inverse depth). Pixels whose projected depth agrees with
/// `depth_j` within [`COVISIBILITY_TOL`] are lifted again from `j` and
/// projected back into `i`; the distance to the starting pixel is the cycle
/// error.
pub fn reprojection_error(depths: &[DepthMap], poses: &[CameraPose]) -> Result<Reprojection> {
    if depths.len() != poses.len() {
        return Err(Error::ShapeMismatch {
            expected: poses.len(),
            actual: depths.len(),
        });
    }
    if depths.len() < 2 {
        return Err(Error::InvalidArgument("reprojection needs at least two views".into()));
    }
    let (mut cycle, mut covis) = (0.0, 0usize);
    let (mut resid, mut landed) = (0.0, 0usize);
    for i in 0..depths.len() {
        for j in 0..depths.len() {
            if i == j {
                continue;
            }
            let (di, dj) = (&depths[i], &depths[j]);
            for row in 0..di.height {
                for col in 0..di.width {
                    let z = di.get(row, col);
                    if !DepthMap::is_valid_value(z) {
                        continue;
                    }
                    let (u, v) = (col as f64 + 0.5, row as f64 + 0.5);
                    let x = poses[i].unproject(u, v, z as f64)?;
                    let (uj, vj, zj) = poses[j].project(&x);
                    if zj <= 0.0 {
                        continue;
                    }
                    let Some(dj_val) = dj.sample_bilinear(uj, vj) else {
                        continue;
                    };
                    let r = (zj - dj_val).abs() / dj_val;
                    resid += r;
                    landed += 1;
                    if r > COVISIBILITY_TOL {
                        continue;
                    }
                    let y = poses[j].unproject(uj, vj, dj_val)?;
                    let (ub, vb, _) = poses[i].project(&y);
                    cycle += libm::hypot(ub - u, vb - v);
                    covis += 1;
                }
            }
        }
    }
    if covis == 0 {
        return Err(Error::NoCovisiblePixels);
    }
    let diag = libm::hypot(depths[0].width as f64, depths[0].height as f64);
    let mean_cycle_px = cycle / covis as f64;
    Ok(Reprojection {
        mean_cycle_px,
        normalized: mean_cycle_px / diag,
        mean_depth_residual: resid / landed.max(1) as f64,
        covisible: covis,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn img(v: f32) -> Image {
        Image::from_data(16, 16, vec![v; 16 * 16 * 3]).unwrap()
    }

    #[test]
    fn identical_images() {
        let mut a = img(0.0);
        for (i, x) in a.data.iter_mut().enumerate() {
            *x = (i % 7) as f32 / 7.0;
        }
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_formula() {
        let a = img(0.5);
        let b = img(0.6);
        // MSE = 0.01 up to f32 rounding of 0.6 − 0.5.
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(psnr_from_mse(0.01), 20.0);
        assert!(psnr(&a, &Image::new(8, 8)).is_err());
    }

    #[test]
    fn depth_identities() {
        let gt = vec![1.0f32, 2.0, 3.0, 4.0];
        let mask = vec![true; 4];
        let e = depth_metrics(&gt, &gt, &mask, true).unwrap();
        assert_eq!(e.abs_rel, 0.0);
        assert_eq!(e.delta_125, 1.0);
        let twice: Vec<f32> = gt.iter().map(|g| g * 2.0).collect();
        let e = depth_metrics(&twice, &gt, &mask, false).unwrap();
        assert!((e.abs_rel - 1.0).abs() < 1e-12);
        assert_eq!(e.delta_125, 0.0);
        // Median alignment removes a global scale entirely.
        let e = depth_metrics(&twice, &gt, &mask, true).unwrap();
        assert!(e.abs_rel < 1e-12);
        assert_eq!(
            depth_metrics(&gt, &gt, &[false; 4], true).unwrap_err(),
            Error::EmptyMask
        );
    }
}
