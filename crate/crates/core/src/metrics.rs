//! Evaluation metrics: PSNR, SSIM, NCC, and LMSE.
//!
//! NCC and LMSE are scale-insensitive — recovered layers are only
//! defined up to intensity scaling — with NCC measuring global
//! agreement and LMSE measuring it locally over windows.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::Image;

/// PSNR is capped by flooring the MSE at this value, which bounds the
/// score at 100 dB for identical images.
pub const MSE_FLOOR: f64 = 1e-10;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

const LMSE_WINDOW: usize = 20;
const LMSE_STRIDE: usize = 10;

/// All four scores for one predicted layer against its ground truth.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub ncc: f64,
    pub lmse: f64,
}

impl MetricReport {
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("psnr", self.psnr),
            ("ssim", self.ssim),
            ("ncc", self.ncc),
            ("lmse", self.lmse),
        ]
    }
}

fn validate(pred: &Image, gt: &Image) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch {
            context: "metrics",
            expected: format!("{:?}", gt.shape()),
            actual: format!("{:?}", pred.shape()),
        });
    }
    for (name, img) in [("prediction", pred), ("ground truth", gt)] {
        if img.iter().any(|&v| !(-1e-6..=1.0 + 1e-6).contains(&v)) {
            return Err(Error::InvalidArgument(format!(
                "{name} has values outside [0, 1]"
            )));
        }
    }
    Ok(())
}

/// Computes all metrics after validating sizes and value ranges.
pub fn metrics(pred: &Image, gt: &Image) -> Result<MetricReport> {
    validate(pred, gt)?;
    Ok(MetricReport {
        psnr: psnr(pred, gt),
        ssim: ssim(pred, gt),
        ncc: ncc(pred, gt),
        lmse: lmse(pred, gt),
    })
}

/// Peak signal-to-noise ratio in dB over all channels, MSE floored at
/// [`MSE_FLOOR`].
pub fn psnr(pred: &Image, gt: &Image) -> f64 {
    let mse = pred
        .iter()
        .zip(gt.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.len() as f64;
    -10.0 * mse.max(MSE_FLOOR).log10()
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let mut k: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Valid-region separable Gaussian filter of one plane.
fn filter_valid(plane: &Array2<f64>, kernel: &[f64]) -> Array2<f64> {
    let (h, w) = plane.dim();
    let k = kernel.len();
    let mut rows = Array2::zeros((h, w - k + 1));
    for y in 0..h {
        for x in 0..w - k + 1 {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                acc += kv * plane[[y, x + i]];
            }
            rows[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h - k + 1, w - k + 1));
    for y in 0..h - k + 1 {
        for x in 0..w - k + 1 {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                acc += kv * rows[[y + i, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5)
/// and the standard constants, averaged over channels. The window
/// shrinks to the largest odd size that fits small images.
pub fn ssim(pred: &Image, gt: &Image) -> f64 {
    let (c, h, w) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    let mut win = SSIM_WINDOW.min(h).min(w);
    if win % 2 == 0 {
        win -= 1;
    }
    let kernel = gaussian_kernel(win, SSIM_SIGMA);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);

    let mut total = 0.0;
    for ch in 0..c {
        let x = pred.index_axis(ndarray::Axis(0), ch).to_owned();
        let y = gt.index_axis(ndarray::Axis(0), ch).to_owned();
        let mu_x = filter_valid(&x, &kernel);
        let mu_y = filter_valid(&y, &kernel);
        let xx = filter_valid(&(&x * &x), &kernel);
        let yy = filter_valid(&(&y * &y), &kernel);
        let xy = filter_valid(&(&x * &y), &kernel);

        let mut acc = 0.0;
        for ((i, j), mx) in mu_x.indexed_iter() {
            let my = mu_y[[i, j]];
            let var_x = xx[[i, j]] - mx * mx;
            let var_y = yy[[i, j]] - my * my;
            let cov = xy[[i, j]] - mx * my;
            let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
            let den = (mx * mx + my * my + c1) * (var_x + var_y + c2);
            acc += num / den;
        }
        total += acc / mu_x.len() as f64;
    }
    total / c as f64
}

/// Global zero-mean normalized cross-correlation over all channels.
/// Both inputs constant: 1 if the constants agree, else 0; one constant
/// input yields 0.
pub fn ncc(pred: &Image, gt: &Image) -> f64 {
    let n = pred.len() as f64;
    let mean_p = pred.iter().sum::<f64>() / n;
    let mean_g = gt.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut var_p = 0.0;
    let mut var_g = 0.0;
    for (a, b) in pred.iter().zip(gt.iter()) {
        let da = a - mean_p;
        let db = b - mean_g;
        num += da * db;
        var_p += da * da;
        var_g += db * db;
    }
    const EPS: f64 = 1e-20;
    if var_p < EPS && var_g < EPS {
        return if (mean_p - mean_g).abs() < 1e-9 { 1.0 } else { 0.0 };
    }
    if var_p < EPS || var_g < EPS {
        return 0.0;
    }
    num / (var_p.sqrt() * var_g.sqrt())
}

fn window_starts(extent: usize, win: usize, stride: usize) -> Vec<usize> {
    if extent <= win {
        return vec![0];
    }
    let mut starts: Vec<usize> = (0..=extent - win).step_by(stride).collect();
    if *starts.last().unwrap() != extent - win {
        starts.push(extent - win);
    }
    starts
}

/// Local mean-squared error: over 20x20 windows with stride 10, the MSE
/// after scaling the prediction window by its least-squares optimal
/// factor, averaged over windows and channels.
pub fn lmse(pred: &Image, gt: &Image) -> f64 {
    let (c, h, w) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    let win_h = LMSE_WINDOW.min(h);
    let win_w = LMSE_WINDOW.min(w);
    let ys = window_starts(h, win_h, LMSE_STRIDE);
    let xs = window_starts(w, win_w, LMSE_STRIDE);

    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for &y0 in &ys {
            for &x0 in &xs {
                let mut pg = 0.0;
                let mut pp = 0.0;
                for y in y0..y0 + win_h {
                    for x in x0..x0 + win_w {
                        let p = pred[[ch, y, x]];
                        let g = gt[[ch, y, x]];
                        pg += p * g;
                        pp += p * p;
                    }
                }
                let alpha = if pp < 1e-12 { 0.0 } else { pg / pp };
                let mut err = 0.0;
                for y in y0..y0 + win_h {
                    for x in x0..x0 + win_w {
                        let d = alpha * pred[[ch, y, x]] - gt[[ch, y, x]];
                        err += d * d;
                    }
                }
                total += err / (win_h * win_w) as f64;
                count += 1;
            }
        }
    }
    total / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(seed: u64, c: usize, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((c, h, w), |_| rng.gen())
    }

    #[test]
    fn identical_images_hit_the_fixed_points() {
        let x = random_image(1, 3, 24, 24);
        let m = metrics(&x, &x).unwrap();
        assert!((m.ssim - 1.0).abs() < 1e-12);
        assert!((m.ncc - 1.0).abs() < 1e-12);
        assert_eq!(m.lmse, 0.0);
        assert_eq!(m.psnr, 100.0);
    }

    #[test]
    fn psnr_of_known_mse() {
        // Uniform squared error of 0.01 gives exactly 20 dB.
        let gt = Array3::from_elem((1, 8, 8), 0.5);
        let pred = Array3::from_elem((1, 8, 8), 0.6);
        assert!((psnr(&pred, &gt) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn ncc_ignores_positive_affine_maps() {
        let x = random_image(3, 1, 16, 16);
        let scaled = x.mapv(|v| 0.5 * v + 0.1);
        assert!((ncc(&scaled, &x) - 1.0).abs() < 1e-12);
        assert!((ncc(&x, &scaled) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ncc_handles_constant_inputs() {
        let flat = Array3::from_elem((1, 8, 8), 0.5);
        assert_eq!(ncc(&flat, &flat), 1.0);
        let other = Array3::from_elem((1, 8, 8), 0.6);
        assert_eq!(ncc(&flat, &other), 0.0);
        let varying = random_image(5, 1, 8, 8);
        assert_eq!(ncc(&flat, &varying), 0.0);
    }

    #[test]
    fn lmse_is_invariant_to_prediction_scaling() {
        let gt = random_image(7, 1, 40, 40);
        let pred = random_image(8, 1, 40, 40);
        let base = lmse(&pred, &gt);
        let scaled = pred.mapv(|v| v * 0.35);
        assert!((lmse(&scaled, &gt) - base).abs() < 1e-12);
    }

    #[test]
    fn lmse_windows_cover_the_image() {
        // 50 pixels with window 20 and stride 10: starts 0,10,20,30.
        assert_eq!(window_starts(50, 20, 10), vec![0, 10, 20, 30]);
        // Non-aligned extent appends a final flush window.
        assert_eq!(window_starts(45, 20, 10), vec![0, 10, 20, 25]);
        // Small images collapse to a single window.
        assert_eq!(window_starts(8, 8, 10), vec![0]);
    }

    #[test]
    fn metrics_rejects_bad_inputs() {
        let a = random_image(9, 1, 8, 8);
        let b = random_image(10, 1, 8, 9);
        assert!(metrics(&a, &b).is_err());
        let out_of_range = Array3::from_elem((1, 8, 8), 1.5);
        assert!(metrics(&a, &out_of_range).is_err());
    }

    #[test]
    fn ssim_penalizes_noise() {
        let x = random_image(11, 1, 32, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let noisy = x.mapv(|v| (v + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0));
        let s = ssim(&noisy, &x);
        assert!(s < 0.99);
        assert!(s > -1.0);
    }
}
