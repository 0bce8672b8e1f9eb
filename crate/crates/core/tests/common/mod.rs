//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's numerical code.
#![allow(dead_code)]

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Dense sensing matrix, rows `x * ny_ext + col`, columns `(b * nx + x) * ny + y`.
/// Band `b` lands `step * b` columns to the right, modulated by the mask.
pub struct DensePhi {
    pub rows: usize,
    pub cols: usize,
    pub a: Vec<f64>,
}

impl DensePhi {
    pub fn build(mask: &[f64], nx: usize, ny: usize, n_lambda: usize, step: usize) -> Self {
        let ny_ext = ny + step * (n_lambda - 1);
        let (rows, cols) = (nx * ny_ext, nx * ny * n_lambda);
        let mut a = vec![0.0; rows * cols];
        for b in 0..n_lambda {
            for x in 0..nx {
                for y in 0..ny {
                    let r = x * ny_ext + y + step * b;
                    let c = (b * nx + x) * ny + y;
                    a[r * cols + c] = mask[x * ny + y];
                }
            }
        }
        DensePhi { rows, cols, a }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| (0..self.cols).map(|c| self.a[r * self.cols + c] * v[c]).sum()).collect()
    }

    pub fn apply_t(&self, w: &[f64]) -> Vec<f64> {
        (0..self.cols).map(|c| (0..self.rows).map(|r| self.a[r * self.cols + c] * w[r]).sum()).collect()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Direct 2-D convolution (cross-correlation) with zero padding, NCHW / OIHW.
#[allow(clippy::too_many_arguments)]
pub fn conv_loop(x: &[f64], b: usize, cin: usize, h: usize, w: usize, k: &[f64], cout: usize, kh: usize, kw: usize, bias: &[f64], pad: usize) -> Vec<f64> {
    let oh = h + 2 * pad - kh + 1;
    let ow = w + 2 * pad - kw + 1;
    let mut out = vec![0.0; b * cout * oh * ow];
    for n in 0..b {
        for o in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = bias[o];
                    for c in 0..cin {
                        for u in 0..kh {
                            for v in 0..kw {
                                let (yi, xj) = (i as isize + u as isize - pad as isize, j as isize + v as isize - pad as isize);
                                if yi >= 0 && xj >= 0 && (yi as usize) < h && (xj as usize) < w {
                                    s += k[((o * cin + c) * kh + u) * kw + v] * x[((n * cin + c) * h + yi as usize) * w + xj as usize];
                                }
                            }
                        }
                    }
                    out[((n * cout + o) * oh + i) * ow + j] = s;
                }
            }
        }
    }
    out
}

/// Orthonormal DCT-II matrix, `d[k * n + i]`.
pub fn dct_matrix(n: usize) -> Vec<f64> {
    let mut d = vec![0.0; n * n];
    for k in 0..n {
        let s = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            d[k * n + i] = s * (std::f64::consts::PI * (i as f64 + 0.5) * k as f64 / n as f64).cos();
        }
    }
    d
}

/// 2-D DCT of one `rows x cols` plane by explicit matrix products.
pub fn dct2(plane: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let (dr, dc) = (dct_matrix(rows), dct_matrix(cols));
    let mut out = vec![0.0; rows * cols];
    for k in 0..rows {
        for l in 0..cols {
            let mut s = 0.0;
            for i in 0..rows {
                for j in 0..cols {
                    s += dr[k * rows + i] * dc[l * cols + j] * plane[i * cols + j];
                }
            }
            out[k * cols + l] = s;
        }
    }
    out
}

pub fn idct2(coeffs: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let (dr, dc) = (dct_matrix(rows), dct_matrix(cols));
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let mut s = 0.0;
            for k in 0..rows {
                for l in 0..cols {
                    s += dr[k * rows + i] * dc[l * cols + j] * coeffs[k * cols + l];
                }
            }
            out[i * cols + j] = s;
        }
    }
    out
}

pub fn psnr_loop(x: &[f64], gt: &[f64], range: f64) -> f64 {
    let mut se = 0.0;
    for i in 0..x.len() {
        se += (x[i] - gt[i]).powi(2);
    }
    let mse = se / x.len() as f64;
    10.0 * (range * range / mse).log10()
}

/// SSIM of one plane with a full 11x11 Gaussian window evaluated directly at
/// every valid position.
pub fn ssim_plane_loop(a: &[f64], b: &[f64], rows: usize, cols: usize, range: f64) -> f64 {
    let n = 11;
    let sigma: f64 = 1.5;
    let mut w = vec![0.0; n * n];
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            w[i * n + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += w[i * n + j];
        }
    }
    for v in &mut w {
        *v /= total;
    }
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let mut acc = 0.0;
    let mut count = 0.0;
    for r in 0..=rows - n {
        for c in 0..=cols - n {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let p = (r + i) * cols + c + j;
                    ma += w[i * n + j] * a[p];
                    mb += w[i * n + j] * b[p];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let p = (r + i) * cols + c + j;
                    va += w[i * n + j] * (a[p] - ma).powi(2);
                    vb += w[i * n + j] * (b[p] - mb).powi(2);
                    cov += w[i * n + j] * (a[p] - ma) * (b[p] - mb);
                }
            }
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1.0;
        }
    }
    acc / count
}

/// Band-major cube SSIM: the mean of per-band plane SSIMs.
pub fn ssim_cube_loop(a: &[f64], b: &[f64], nx: usize, ny: usize, n_lambda: usize) -> f64 {
    let plane = nx * ny;
    (0..n_lambda).map(|l| ssim_plane_loop(&a[l * plane..(l + 1) * plane], &b[l * plane..(l + 1) * plane], nx, ny, 1.0)).sum::<f64>() / n_lambda as f64
}

/// RDFNet parameter count from layer shapes: `k x k` convs with bias.
pub fn rdfnet_param_count(phases: usize, blocks: usize, bands: usize, c: usize) -> usize {
    let conv = |o: usize, i: usize, k: usize| o * i * k * k + o;
    let block = 4 * conv(c, c, 3) + conv(c, c, 3) + conv(c, c, 1) + 1;
    let phase = conv(c, bands, 3) + blocks * block + conv(c, c, 3) + conv(blocks, c, 1) + conv(bands, c, 3) + 1;
    phases * phase
}
