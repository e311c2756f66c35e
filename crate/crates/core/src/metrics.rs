//! Image quality metrics for hyperspectral cubes.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

/// Value reported for a band (or cube) reconstructed without error.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn check_shapes(a: &Tensor3, b: &Tensor3) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Band-averaged peak signal-to-noise ratio in dB, each band capped at
/// [`PSNR_CAP`].
pub fn psnr(reference: &Tensor3, estimate: &Tensor3, peak: f64) -> Result<f64> {
    check_shapes(reference, estimate)?;
    let (_, _, n3) = reference.dims();
    let mut total = 0.0;
    for k in 0..n3 {
        let a = reference.band(k);
        let b = estimate.band(k);
        let mse = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
        total += if mse == 0.0 {
            PSNR_CAP
        } else {
            (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
        };
    }
    Ok(total / n3 as f64)
}

/// Normalized `n × n` Gaussian window.
pub fn gaussian_window(n: usize, sigma: f64) -> Array2<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    Array2::from_shape_fn((n, n), |(i, j)| g[i] * g[j] / (total * total))
}

/// Valid-region correlation of `img` with `win`.
fn filter_valid(img: &ArrayView2<f64>, win: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = win.nrows();
    Array2::from_shape_fn((h - n + 1, w - n + 1), |(i, j)| {
        let mut acc = 0.0;
        for a in 0..n {
            for b in 0..n {
                acc += win[[a, b]] * img[[i + a, j + b]];
            }
        }
        acc
    })
}

fn ssim_band(a: ArrayView2<f64>, b: ArrayView2<f64>, win: &Array2<f64>, c1: f64, c2: f64) -> f64 {
    let mu_a = filter_valid(&a, win);
    let mu_b = filter_valid(&b, win);
    let aa = filter_valid(&(&a * &a).view(), win);
    let bb = filter_valid(&(&b * &b).view(), win);
    let ab = filter_valid(&(&a * &b).view(), win);
    let mut total = 0.0;
    for idx in 0..mu_a.len() {
        let (i, j) = (idx / mu_a.ncols(), idx % mu_a.ncols());
        let (ma, mb) = (mu_a[[i, j]], mu_b[[i, j]]);
        let va = aa[[i, j]] - ma * ma;
        let vb = bb[[i, j]] - mb * mb;
        let cov = ab[[i, j]] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / mu_a.len() as f64
}

/// Band-averaged single-scale SSIM with an 11×11 Gaussian window (σ = 1.5)
/// over the valid region, peak 1.
pub fn ssim(reference: &Tensor3, estimate: &Tensor3) -> Result<f64> {
    ssim_with_peak(reference, estimate, 1.0)
}

pub fn ssim_with_peak(reference: &Tensor3, estimate: &Tensor3, peak: f64) -> Result<f64> {
    check_shapes(reference, estimate)?;
    let (n1, n2, n3) = reference.dims();
    if n1 < SSIM_WINDOW || n2 < SSIM_WINDOW {
        return Err(Error::WindowTooLarge {
            window: SSIM_WINDOW,
            rows: n1,
            cols: n2,
        });
    }
    let win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let total: f64 = (0..n3)
        .map(|k| ssim_band(reference.band(k), estimate.band(k), &win, c1, c2))
        .sum();
    Ok(total / n3 as f64)
}

/// Mean spectral angle in radians over positions where neither spectrum is zero.
///
/// The angle between unit vectors `a`, `b` is evaluated as
/// `2·atan2(‖a − b‖, ‖a + b‖)`, which equals `arccos⟨a, b⟩` but stays exact
/// near zero.
pub fn sam(reference: &Tensor3, estimate: &Tensor3) -> Result<f64> {
    check_shapes(reference, estimate)?;
    let (n1, n2, n3) = reference.dims();
    let (ra, ea) = (reference.as_array(), estimate.as_array());
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n1 {
        for j in 0..n2 {
            let (mut na, mut nb) = (0.0f64, 0.0f64);
            for k in 0..n3 {
                na += ra[[i, j, k]] * ra[[i, j, k]];
                nb += ea[[i, j, k]] * ea[[i, j, k]];
            }
            if na == 0.0 || nb == 0.0 {
                continue;
            }
            let (na, nb) = (na.sqrt(), nb.sqrt());
            let (mut diff, mut sum) = (0.0, 0.0);
            for k in 0..n3 {
                let (a, b) = (ra[[i, j, k]] / na, ea[[i, j, k]] / nb);
                diff += (a - b) * (a - b);
                sum += (a + b) * (a + b);
            }
            total += 2.0 * diff.sqrt().atan2(sum.sqrt());
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::AllSpectraZero);
    }
    Ok(total / count as f64)
}

/// PSNR, SSIM and SAM of one estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quality {
    pub psnr: f64,
    pub ssim: f64,
    pub sam: f64,
}

pub fn quality(reference: &Tensor3, estimate: &Tensor3) -> Result<Quality> {
    Ok(Quality {
        psnr: psnr(reference, estimate, 1.0)?,
        ssim: ssim(reference, estimate)?,
        sam: sam(reference, estimate)?,
    })
}
