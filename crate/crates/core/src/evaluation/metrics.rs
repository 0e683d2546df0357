//! PSNR and SSIM on luminance images in `[0, 1]`.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_shapes(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::domain(format!(
            "image shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

pub fn mse(truth: ArrayView2<'_, f64>, recon: ArrayView2<'_, f64>) -> Result<f64> {
    check_shapes(truth, recon)?;
    let n = truth.len() as f64;
    Ok(truth
        .iter()
        .zip(recon.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `10 log10(peak² / MSE)`, capped at 100 dB.
pub fn psnr(truth: ArrayView2<'_, f64>, recon: ArrayView2<'_, f64>, peak: f64) -> Result<f64> {
    let mse = mse(truth, recon)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let raw: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian filtering over the valid region only.
fn filter_valid(img: &Array2<f64>, taps: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for i in 0..h {
        for j in 0..ow {
            rows[[i, j]] = (0..k).map(|t| taps[t] * img[[i, j + t]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            out[[i, j]] = (0..k).map(|t| taps[t] * rows[[i + t, j]]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5),
/// `k1 = 0.01`, `k2 = 0.03` and dynamic range 1, averaged over the positions
/// where the window fits entirely inside the image.
pub fn ssim(truth: ArrayView2<'_, f64>, recon: ArrayView2<'_, f64>) -> Result<f64> {
    check_shapes(truth, recon)?;
    let (h, w) = truth.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::domain(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, image is {h}x{w}"
        )));
    }
    let taps = gaussian_window();
    let x = truth.to_owned();
    let y = recon.to_owned();
    let mu_x = filter_valid(&x, &taps);
    let mu_y = filter_valid(&y, &taps);
    let xx = filter_valid(&(&x * &x), &taps);
    let yy = filter_valid(&(&y * &y), &taps);
    let xy = filter_valid(&(&x * &y), &taps);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    for idx in 0..mu_x.len() {
        let (mx, my) = (mu_x.as_slice().unwrap()[idx], mu_y.as_slice().unwrap()[idx]);
        let sx = xx.as_slice().unwrap()[idx] - mx * mx;
        let sy = yy.as_slice().unwrap()[idx] - my * my;
        let sxy = xy.as_slice().unwrap()[idx] - mx * my;
        total += ((2.0 * mx * my + c1) * (2.0 * sxy + c2))
            / ((mx * mx + my * my + c1) * (sx + sy + c2));
    }
    Ok(total / mu_x.len() as f64)
}
