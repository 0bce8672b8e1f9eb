//! Orthonormal 2-D DCT-II applied band by band.

use crate::optics::SpectralCube;

/// `basis[k * n + i] = a_k cos(pi (2i + 1) k / 2n)`, with `a_0 = sqrt(1/n)` and `a_k = sqrt(2/n)`.
fn basis(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for k in 0..n {
        let a = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            m[k * n + i] = a * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    m
}

/// Precomputed row and column bases for one plane size.
#[derive(Clone, Debug)]
pub struct Dct2d {
    rows: usize,
    cols: usize,
    row_basis: Vec<f64>,
    col_basis: Vec<f64>,
}

impl Dct2d {
    pub fn new(rows: usize, cols: usize) -> Self {
        Dct2d { rows, cols, row_basis: basis(rows), col_basis: basis(cols) }
    }

    /// `C_r * plane * C_c^T` (or the transpose pair when `inverse`).
    fn apply_plane(&self, plane: &[f64], out: &mut [f64], inverse: bool) {
        let (r, c) = (self.rows, self.cols);
        let mut tmp = vec![0.0; r * c];
        // rows: tmp[k, j] = sum_i R[k, i] plane[i, j]  (inverse uses R^T)
        for k in 0..r {
            for i in 0..r {
                let w = if inverse { self.row_basis[i * r + k] } else { self.row_basis[k * r + i] };
                if w == 0.0 {
                    continue;
                }
                for j in 0..c {
                    tmp[k * c + j] += w * plane[i * c + j];
                }
            }
        }
        for k in 0..r {
            for l in 0..c {
                let mut acc = 0.0;
                for j in 0..c {
                    let w = if inverse { self.col_basis[j * c + l] } else { self.col_basis[l * c + j] };
                    acc += tmp[k * c + j] * w;
                }
                out[k * c + l] = acc;
            }
        }
    }

    fn apply(&self, cube: &SpectralCube, inverse: bool) -> SpectralCube {
        assert_eq!((cube.nx(), cube.ny()), (self.rows, self.cols), "DCT plan extent mismatch");
        let mut out = cube.clone();
        let plane = self.rows * self.cols;
        for b in 0..cube.n_lambda() {
            self.apply_plane(cube.band(b), &mut out.data_mut()[b * plane..(b + 1) * plane], inverse);
        }
        out
    }

    pub fn forward(&self, cube: &SpectralCube) -> SpectralCube {
        self.apply(cube, false)
    }

    pub fn inverse(&self, coeffs: &SpectralCube) -> SpectralCube {
        self.apply(coeffs, true)
    }
}
