//! Reconstruction and editing metrics.

use enm_core::vector::mean_squared_diff;
use enm_core::GaussianMixture;

use crate::error::{BenchError, Result};

pub use enm_core::analysis::edit_fidelity_nll;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(BenchError::Shape(format!(
            "vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    same_len(a, b)?;
    Ok(mean_squared_diff(a, b))
}

/// Peak signal-to-noise ratio in dB; `+inf` for identical inputs.
pub fn psnr(a: &[f64], b: &[f64], data_range: f64) -> Result<f64> {
    if data_range.is_nan() || data_range <= 0.0 {
        return Err(BenchError::Config(format!(
            "data range must be positive, got {data_range}"
        )));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

/// Side of the Gaussian window used for an `h x w` raster: 11, or the
/// largest odd size that fits.
pub fn ssim_window(h: usize, w: usize) -> usize {
    let s = SSIM_WINDOW.min(h).min(w);
    if s.is_multiple_of(2) {
        s - 1
    } else {
        s
    }
}

fn gaussian_kernel(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let mut k = Vec::with_capacity(size * size);
    for y in &g {
        for x in &g {
            k.push(x * y);
        }
    }
    let total: f64 = k.iter().sum();
    k.iter().map(|v| v / total).collect()
}

/// Mean SSIM over all fully contained Gaussian windows, for data in `[0, 1]`.
pub fn ssim(a: &[f64], b: &[f64], raster: (usize, usize)) -> Result<f64> {
    let (h, w) = raster;
    if h == 0 || w == 0 || h * w != a.len() || a.len() != b.len() {
        return Err(BenchError::Shape(format!(
            "raster {h}x{w} does not fit vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let s = ssim_window(h, w);
    let kernel = gaussian_kernel(s);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for top in 0..=(h - s) {
        for left in 0..=(w - s) {
            let (mut mx, mut my) = (0.0, 0.0);
            let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
            for dy in 0..s {
                for dx in 0..s {
                    let k = kernel[dy * s + dx];
                    let i = (top + dy) * w + left + dx;
                    mx += k * a[i];
                    my += k * b[i];
                    xx += k * a[i] * a[i];
                    yy += k * b[i] * b[i];
                    xy += k * a[i] * b[i];
                }
            }
            let vx = xx - mx * mx;
            let vy = yy - my * my;
            let cov = xy - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Square raster for `d` when `d` is a perfect square.
pub fn square_raster(d: usize) -> Option<(usize, usize)> {
    let side = (d as f64).sqrt().round() as usize;
    (side * side == d && side > 1).then_some((side, side))
}

/// Fixed affine map of the mixture's `mean +- 3 sigma` box onto `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub lo: f64,
    pub hi: f64,
}

impl Normalizer {
    pub fn for_mixture(gmm: &GaussianMixture) -> Self {
        let (lo, hi) = gmm.bounding_box();
        Normalizer { lo, hi }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let span = self.hi - self.lo;
        x.iter().map(|v| (v - self.lo) / span).collect()
    }
}
