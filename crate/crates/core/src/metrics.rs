//! Reference-free image metrics: PSNR and SSIM.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Returned by [`psnr`] for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
}

/// `10 log10(max² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Real>(a: &Tensor<T>, b: &Tensor<T>, max_val: f64) -> Result<f64> {
    a.expect_same_dims(b, "psnr")?;
    if !(max_val > 0.0) {
        return Err(Error::invalid(
            "psnr",
            format!("max_val must be > 0, got {max_val}"),
        ));
    }
    if a.is_empty() {
        return Err(Error::shape("psnr", "empty image"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.f64() - y.f64()).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h×w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let n = g.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..n).map(|i| g[i] * x[y * w + x0 + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..n).map(|i| g[i] * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

fn gray<T: Real>(t: &Tensor<T>) -> Result<(Vec<f64>, usize, usize)> {
    let (c, h, w) = match t.dims() {
        &[c, h, w] => (c, h, w),
        &[h, w] => (1, h, w),
        d => {
            return Err(Error::shape(
                "ssim",
                format!("expected [C,H,W] or [H,W], got {d:?}"),
            ))
        }
    };
    let plane = h * w;
    let g = (0..plane)
        .map(|p| (0..c).map(|ch| t.data()[ch * plane + p].f64()).sum::<f64>() / c as f64)
        .collect();
    Ok((g, h, w))
}

/// SSIM of two images in `[0, 1]` (`[C, H, W]`, converted to grayscale by
/// the channel mean), averaged over all valid window positions.
pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_dims(b, "ssim")?;
    let (x, h, w) = gray(a)?;
    let (y, _, _) = gray(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        ));
    }
    let g = gaussian_window();
    let f = |v: &[f64]| filter_valid(v, h, w, &g);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| a * b).collect::<Vec<f64>>();
    let (mx, my) = (f(&x), f(&y));
    let (sxx, syy, sxy) = (f(&prod(&x, &x)), f(&prod(&y, &y)), f(&prod(&x, &y)));
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + C1) * (2.0 * cxy + C2)) / ((ux * ux + uy * uy + C1) * (vx + vy + C2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Per-image metrics of `[B, C, H, W]` batches, averaged over the batch.
pub fn batch_metrics<T: Real>(a: &Tensor<T>, b: &Tensor<T>, max_val: f64) -> Result<MetricReport> {
    a.expect_same_dims(b, "metrics")?;
    a.expect_rank(4, "metrics")?;
    let n = a.dims()[0];
    let (mut p, mut s) = (0.0, 0.0);
    for i in 0..n {
        let (x, y) = (a.slice_first(i, 1)?, b.slice_first(i, 1)?);
        let (x, y) = (x.reshape(&a.dims()[1..])?, y.reshape(&b.dims()[1..])?);
        p += psnr(&x, &y, max_val)?;
        s += ssim(&x, &y)?;
    }
    Ok(MetricReport {
        psnr_db: p / n as f64,
        ssim: s / n as f64,
    })
}
