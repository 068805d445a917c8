//! Reconstruction quality scores: mean squared error and single-scale SSIM.
//!
//! SSIM uses the original defaults: 11x11 Gaussian window with sigma 1.5,
//! C1 = (0.01)^2 and C2 = (0.03)^2 for dynamic range 1, valid windows only
//! (no padding), mean over windows.

use crate::data::{Image, IMAGE_SIDE};
use crate::{Error, Result};

const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub mse: f64,
    pub ssim: f64,
}

pub fn report(a: &Image, b: &Image) -> MetricReport {
    MetricReport {
        mse: mse(a, b),
        ssim: ssim(a, b),
    }
}

pub fn mse(a: &Image, b: &Image) -> f64 {
    mse_grid(a.data(), b.data()).expect("images share dimensions")
}

pub fn ssim(a: &Image, b: &Image) -> f64 {
    ssim_grid(a.data(), b.data(), IMAGE_SIDE, IMAGE_SIDE).expect("images share dimensions")
}

/// Mean of squared differences over two equally sized grids.
pub fn mse_grid(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            context: "mse".into(),
            expected: vec![a.len()],
            got: vec![b.len()],
        });
    }
    let sum: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

fn gaussian_window() -> [f64; WINDOW * WINDOW] {
    let mut w = [0.0; WINDOW * WINDOW];
    let mid = (WINDOW / 2) as f64;
    let mut total = 0.0;
    for i in 0..WINDOW {
        for j in 0..WINDOW {
            let d2 = (i as f64 - mid).powi(2) + (j as f64 - mid).powi(2);
            let v = (-d2 / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
            w[i * WINDOW + j] = v;
            total += v;
        }
    }
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Single-scale SSIM over all valid 11x11 windows of an h x w grid with
/// values in [0, 1].
pub fn ssim_grid(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::Shape {
            context: "ssim".into(),
            expected: vec![h, w],
            got: vec![a.len(), b.len()],
        });
    }
    if h < WINDOW || w < WINDOW {
        return Err(Error::Config(format!(
            "ssim needs at least {WINDOW}x{WINDOW}, got {h}x{w}"
        )));
    }
    let win = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for top in 0..=(h - WINDOW) {
        for left in 0..=(w - WINDOW) {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            for i in 0..WINDOW {
                for j in 0..WINDOW {
                    let wt = win[i * WINDOW + j];
                    mu_a += wt * a[(top + i) * w + left + j];
                    mu_b += wt * b[(top + i) * w + left + j];
                }
            }
            let mut var_a = 0.0;
            let mut var_b = 0.0;
            let mut cov = 0.0;
            for i in 0..WINDOW {
                for j in 0..WINDOW {
                    let wt = win[i * WINDOW + j];
                    let da = a[(top + i) * w + left + j] - mu_a;
                    let db = b[(top + i) * w + left + j] - mu_b;
                    var_a += wt * da * da;
                    var_b += wt * db * db;
                    cov += wt * da * db;
                }
            }
            let num = (2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2);
            let den = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}
