//! PSNR and SSIM over spectral cubes.

use crate::error::{Error, Result};
use crate::optics::SpectralCube;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(x: &SpectralCube, gt: &SpectralCube) -> Result<()> {
    if !x.same_extents(gt) {
        return Err(Error::dim(format!(
            "metric inputs differ: {}x{}x{} vs {}x{}x{}",
            x.nx(),
            x.ny(),
            x.n_lambda(),
            gt.nx(),
            gt.ny(),
            gt.n_lambda()
        )));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / mse).log10()
    }
}

/// `10 log10(range^2 / MSE)` over every element; identical inputs give `+inf`.
pub fn psnr(x: &SpectralCube, gt: &SpectralCube, data_range: f64) -> Result<f64> {
    check_pair(x, gt)?;
    let n = x.data().len() as f64;
    let mse = x.data().iter().zip(gt.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    Ok(psnr_from_mse(mse, data_range))
}

/// PSNR per band, averaged in dB. Logged next to the whole-cube figure.
pub fn psnr_band_average(x: &SpectralCube, gt: &SpectralCube, data_range: f64) -> Result<f64> {
    check_pair(x, gt)?;
    let plane = (x.nx() * x.ny()) as f64;
    let total: f64 = (0..x.n_lambda())
        .map(|b| {
            let mse = x.band(b).iter().zip(gt.band(b)).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / plane;
            psnr_from_mse(mse, data_range)
        })
        .sum();
    Ok(total / x.n_lambda() as f64)
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering of a row-major plane.
fn filter_valid(plane: &[f64], rows: usize, cols: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (orows, ocols) = (rows - k + 1, cols - k + 1);
    let mut horiz = vec![0.0; rows * ocols];
    for r in 0..rows {
        for c in 0..ocols {
            horiz[r * ocols + c] = (0..k).map(|j| taps[j] * plane[r * cols + c + j]).sum();
        }
    }
    let mut out = vec![0.0; orows * ocols];
    for r in 0..orows {
        for c in 0..ocols {
            out[r * ocols + c] = (0..k).map(|i| taps[i] * horiz[(r + i) * ocols + c]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], rows: usize, cols: usize, taps: &[f64], data_range: f64) -> f64 {
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let prod = |f: &dyn Fn(usize) -> f64| (0..a.len()).map(f).collect::<Vec<f64>>();
    let mu_a = filter_valid(a, rows, cols, taps);
    let mu_b = filter_valid(b, rows, cols, taps);
    let e_aa = filter_valid(&prod(&|i| a[i] * a[i]), rows, cols, taps);
    let e_bb = filter_valid(&prod(&|i| b[i] * b[i]), rows, cols, taps);
    let e_ab = filter_valid(&prod(&|i| a[i] * b[i]), rows, cols, taps);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    total / n as f64
}

/// Band-averaged SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, evaluated at every position where the window fits.
pub fn ssim(x: &SpectralCube, gt: &SpectralCube) -> Result<f64> {
    ssim_with_range(x, gt, 1.0)
}

pub fn ssim_with_range(x: &SpectralCube, gt: &SpectralCube, data_range: f64) -> Result<f64> {
    check_pair(x, gt)?;
    if x.nx() < SSIM_WINDOW || x.ny() < SSIM_WINDOW {
        return Err(Error::dim(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            x.nx(),
            x.ny()
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let total: f64 = (0..x.n_lambda()).map(|b| ssim_plane(x.band(b), gt.band(b), x.nx(), x.ny(), &taps, data_range)).sum();
    Ok(total / x.n_lambda() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneMetrics {
    pub name: String,
    pub psnr_db: f64,
    pub psnr_band_avg_db: f64,
    /// `None` when the scene is smaller than the SSIM window.
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub scenes: Vec<SceneMetrics>,
    pub avg_psnr_db: f64,
    pub avg_ssim: Option<f64>,
    pub data_range: f64,
}

impl MetricReport {
    pub fn evaluate<'a>(pairs: impl IntoIterator<Item = (String, &'a SpectralCube, &'a SpectralCube)>, data_range: f64) -> Result<Self> {
        let mut scenes = Vec::new();
        for (name, x, gt) in pairs {
            let ssim = if x.nx() >= SSIM_WINDOW && x.ny() >= SSIM_WINDOW { Some(ssim_with_range(x, gt, data_range)?) } else { None };
            scenes.push(SceneMetrics {
                name,
                psnr_db: psnr(x, gt, data_range)?,
                psnr_band_avg_db: psnr_band_average(x, gt, data_range)?,
                ssim,
            });
        }
        if scenes.is_empty() {
            return Err(Error::dim("metric report over zero scenes"));
        }
        let n = scenes.len() as f64;
        let avg_psnr_db = scenes.iter().map(|s| s.psnr_db).sum::<f64>() / n;
        let avg_ssim = scenes.iter().map(|s| s.ssim).sum::<Option<f64>>().map(|t| t / n);
        Ok(MetricReport { scenes, avg_psnr_db, avg_ssim, data_range })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(n: usize, f: impl Fn(usize) -> f64) -> SpectralCube {
        SpectralCube::new(n, n, 2, (0..n * n * 2).map(f).collect()).unwrap()
    }

    #[test]
    fn identical_inputs() {
        let a = cube(16, |i| (i % 13) as f64 / 13.0);
        assert!(psnr(&a, &a, 1.0).unwrap().is_infinite());
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn twenty_db_at_mse_point_zero_one() {
        let gt = cube(4, |_| 0.5);
        let x = cube(4, |i| if i % 2 == 0 { 0.6 } else { 0.4 });
        assert!((psnr(&x, &gt, 1.0).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn small_images_rejected_by_ssim() {
        let a = cube(8, |_| 0.0);
        assert!(matches!(ssim(&a, &a), Err(Error::Dimension(_))));
        let b = SpectralCube::zeros(16, 16, 1).unwrap();
        assert!(psnr(&a, &b, 1.0).is_err());
    }

    #[test]
    fn inverted_image_scores_low() {
        let gt = cube(16, |i| if (i / 4 + i / 64) % 2 == 0 { 0.95 } else { 0.05 });
        let inv = SpectralCube::new(16, 16, 2, gt.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        assert!(ssim(&inv, &gt).unwrap() < 0.5);
    }
}
