//! Full-reference image quality metrics.

use crate::error::{invalid, Result};
use crate::image::ImageTensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Peak signal-to-noise ratio in dB; `+inf` for identical images.
pub fn psnr(a: &ImageTensor, b: &ImageTensor, data_range: f64) -> Result<f64> {
    a.ensure_same_shape(b)?;
    if !(data_range > 0.0) {
        return Err(invalid(format!("data range must be positive, got {data_range}")));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / mse).log10())
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (k, t) in taps.iter_mut().enumerate() {
        let d = k as f64 - half;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable Gaussian filter over all fully contained windows.
fn filter_valid(img: &[f64], n: usize, taps: &[f64]) -> Vec<f64> {
    let m = n + 1 - taps.len();
    let mut rows = vec![0.0; n * m];
    for r in 0..n {
        for c in 0..m {
            rows[r * m + c] = taps.iter().enumerate().map(|(k, t)| t * img[r * n + c + k]).sum();
        }
    }
    let mut out = vec![0.0; m * m];
    for r in 0..m {
        for c in 0..m {
            out[r * m + c] = taps.iter().enumerate().map(|(k, t)| t * rows[(r + k) * m + c]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11x11 Gaussian window (std 1.5),
/// `K1 = 0.01`, `K2 = 0.03` and data range 1.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let n = a.n();
    if n < SSIM_WINDOW {
        return Err(invalid(format!("SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {n}x{n}")));
    }
    let taps = gaussian_taps();
    let (x, y) = (a.data(), b.data());
    let prod = |f: &dyn Fn(usize) -> f64| (0..x.len()).map(f).collect::<Vec<f64>>();
    let mu_a = filter_valid(x, n, &taps);
    let mu_b = filter_valid(y, n, &taps);
    let aa = filter_valid(&prod(&|k| x[k] * x[k]), n, &taps);
    let bb = filter_valid(&prod(&|k| y[k] * y[k]), n, &taps);
    let ab = filter_valid(&prod(&|k| x[k] * y[k]), n, &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let total: f64 = (0..mu_a.len())
        .map(|k| {
            let (ma, mb) = (mu_a[k], mu_b[k]);
            let va = aa[k] - ma * ma;
            let vb = bb[k] - mb * mb;
            let cov = ab[k] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / mu_a.len() as f64)
}
