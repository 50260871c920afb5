//! PSNR and single-scale SSIM for unit-range images.

use super::ImageTensor;
use crate::error::{Error, Result};

/// PSNR cap: avoids infinities in reports when MSE underflows.
pub const PSNR_CAP_DB: f64 = 100.0;
const PSNR_MSE_FLOOR: f64 = 1e-10;

/// SSIM parameters: 11x11 Gaussian window, sigma 1.5, standard stabilizers
/// for unit dynamic range.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn check_same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", a.data.dim()),
            got: format!("{:?}", b.data.dim()),
        });
    }
    Ok(())
}

/// `10·log10(1/MSE)` for unit dynamic range, capped at 100 dB.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let mut acc = 0.0f64;
    for (x, y) in a.data.iter().zip(b.data.iter()) {
        let d = *x as f64 - *y as f64;
        acc += d * d;
    }
    let mse = acc / a.data.len() as f64;
    if mse < PSNR_MSE_FLOOR {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Normalized 11x11 Gaussian window weights (sigma 1.5).
pub fn gaussian_window() -> Vec<f64> {
    let n = SSIM_WINDOW;
    let c = (n / 2) as f64;
    let mut w = vec![0.0f64; n * n];
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[i * n + j] = v;
            sum += v;
        }
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Mean local SSIM over all fully-contained 11x11 windows, per channel,
/// averaged over the three channels.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    check_same_shape(a, b)?;
    let (h, w, _) = a.data.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ShapeMismatch {
            expected: format!("min side >= {SSIM_WINDOW}"),
            got: format!("{h}x{w}"),
        });
    }
    let win = gaussian_window();
    let n = SSIM_WINDOW;
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut total = 0.0f64;
    for c in 0..3 {
        let mut ch_sum = 0.0f64;
        for y0 in 0..oh {
            for x0 in 0..ow {
                let mut mu_x = 0.0f64;
                let mut mu_y = 0.0f64;
                let mut xx = 0.0f64;
                let mut yy = 0.0f64;
                let mut xy = 0.0f64;
                for i in 0..n {
                    for j in 0..n {
                        let wt = win[i * n + j];
                        let xv = a.data[(y0 + i, x0 + j, c)] as f64;
                        let yv = b.data[(y0 + i, x0 + j, c)] as f64;
                        mu_x += wt * xv;
                        mu_y += wt * yv;
                        xx += wt * xv * xv;
                        yy += wt * yv * yv;
                        xy += wt * xv * yv;
                    }
                }
                let var_x = xx - mu_x * mu_x;
                let var_y = yy - mu_y * mu_y;
                let cov = xy - mu_x * mu_y;
                let s = ((2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2));
                ch_sum += s;
            }
        }
        total += ch_sum / (oh * ow) as f64;
    }
    Ok(total / 3.0)
}
