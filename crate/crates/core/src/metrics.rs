//! PSNR and SSIM on [0,1] images, plus the aggregate report row used by
//! evaluation output.

use crate::error::{Error, Result};
use crate::img::ImageBuf;

/// MSE below this threshold reports the PSNR cap.
pub const PSNR_MSE_FLOOR: f64 = 1e-10;
/// Cap in dB for (near-)identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Per-set averages over `n_images` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub n_images: usize,
}

fn check_same_shape(a: &ImageBuf, b: &ImageBuf) -> Result<()> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::shape(format!(
            "metric inputs {}x{} vs {}x{}",
            a.h, a.w, b.h, b.w
        )));
    }
    Ok(())
}

pub fn mse(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    check_same_shape(a, b)?;
    let mut acc = 0.0f64;
    for (x, y) in a.data.iter().zip(&b.data) {
        let d = *x as f64 - *y as f64;
        acc += d * d;
    }
    Ok(acc / a.data.len() as f64)
}

/// Peak signal-to-noise ratio in dB: `10 log10(1 / MSE)`, capped at
/// [`PSNR_CAP_DB`] when the MSE falls below `1e-10`.
pub fn psnr(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    let m = mse(a, b)?;
    if m < PSNR_MSE_FLOOR {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (1.0 / m).log10())
}

fn gaussian_kernel_1d() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0f64; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Valid-region separable Gaussian filter of one channel plane.
fn blur_valid(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_kernel_1d();
    let wo = w - SSIM_WINDOW + 1;
    let ho = h - SSIM_WINDOW + 1;
    let mut horiz = vec![0.0f64; h * wo];
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * plane[y * w + x + i];
            }
            horiz[y * wo + x] = acc;
        }
    }
    let mut out = vec![0.0f64; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * horiz[(y + i) * wo + x];
            }
            out[y * wo + x] = acc;
        }
    }
    out
}

fn channel_plane(img: &ImageBuf, c: usize) -> Vec<f64> {
    (0..img.h * img.w).map(|p| img.data[p * 3 + c] as f64).collect()
}

fn ssim_channel(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let mu_a = blur_valid(a, h, w);
    let mu_b = blur_valid(b, h, w);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let e_aa = blur_valid(&aa, h, w);
    let e_bb = blur_valid(&bb, h, w);
    let e_ab = blur_valid(&ab, h, w);
    let mut acc = 0.0f64;
    for i in 0..mu_a.len() {
        let va = e_aa[i] - mu_a[i] * mu_a[i];
        let vb = e_bb[i] - mu_b[i] * mu_b[i];
        let cov = e_ab[i] - mu_a[i] * mu_b[i];
        let num = (2.0 * mu_a[i] * mu_b[i] + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + SSIM_C1) * (va + vb + SSIM_C2);
        acc += num / den;
    }
    acc / mu_a.len() as f64
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5),
/// `C1 = 0.01^2`, `C2 = 0.03^2`, averaged over the three channels.
pub fn ssim(a: &ImageBuf, b: &ImageBuf) -> Result<f64> {
    check_same_shape(a, b)?;
    if a.h < SSIM_WINDOW || a.w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {}x{}",
            a.h, a.w
        )));
    }
    let mut acc = 0.0;
    for c in 0..3 {
        acc += ssim_channel(&channel_plane(a, c), &channel_plane(b, c), a.h, a.w);
    }
    Ok(acc / 3.0)
}

/// Averages per-pair PSNR and SSIM over a set of image pairs.
pub fn evaluate_pairs(pairs: &[(ImageBuf, ImageBuf)]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::config("cannot evaluate an empty pair set"));
    }
    let mut psnr_acc = 0.0;
    let mut ssim_acc = 0.0;
    for (a, b) in pairs {
        psnr_acc += psnr(a, b)?;
        ssim_acc += ssim(a, b)?;
    }
    let n = pairs.len();
    Ok(MetricReport { psnr_db: psnr_acc / n as f64, ssim: ssim_acc / n as f64, n_images: n })
}
