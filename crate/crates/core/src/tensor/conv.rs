//! 2-D cross-correlation kernels over NCHW buffers.
//!
//! The fast path lowers each batch element to an im2col matrix and hands the
//! product to `matrixmultiply`. `conv2d_reference` is the direct nested loop.

use crate::error::{Error, Result};

/// Extents of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], padding: usize) -> Result<Self> {
        let (batch, in_channels, height, width) = match *input {
            [b, c, h, w] => (b, c, h, w),
            _ => return Err(Error::dim(format!("conv2d input must be 4-D, got {input:?}"))),
        };
        let (out_channels, kc, kernel_h, kernel_w) = match *kernel {
            [o, c, kh, kw] => (o, c, kh, kw),
            _ => return Err(Error::dim(format!("conv2d kernel must be 4-D, got {kernel:?}"))),
        };
        if kc != in_channels {
            return Err(Error::dim(format!(
                "conv2d kernel expects {kc} input channels, input has {in_channels}"
            )));
        }
        if kernel_h % 2 == 0 || kernel_w % 2 == 0 {
            return Err(Error::domain(format!("conv2d kernel extents must be odd, got {kernel_h}x{kernel_w}")));
        }
        if height + 2 * padding < kernel_h || width + 2 * padding < kernel_w {
            return Err(Error::dim("conv2d kernel larger than padded input"));
        }
        Ok(ConvGeometry { batch, in_channels, height, width, out_channels, kernel_h, kernel_w, padding })
    }

    pub fn out_h(&self) -> usize {
        self.height + 2 * self.padding - self.kernel_h + 1
    }

    pub fn out_w(&self) -> usize {
        self.width + 2 * self.padding - self.kernel_w + 1
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h(), self.out_w()]
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Row `(c, ky, kx)` of the patch matrix holds the padded input sample each
/// output pixel sees through that tap.
fn im2col(g: &ConvGeometry, x: &[f64], col: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize + kx as isize - pad;
                        *v = if ix < 0 || ix >= g.width as isize { 0.0 } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add(g: &ConvGeometry, col: &[f64], dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pad = g.padding as isize;
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = ox as isize + kx as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Row-major `c[m x n] = alpha * a[m x k] * b[k x n] + beta * c`, with explicit
/// strides so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Same-layout cross-correlation with zero padding: `out[b,o] = bias[o] + sum_c w[o,c] * x[b,c]`.
pub fn conv2d_forward(g: &ConvGeometry, x: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let (kp, np) = (g.patch_len(), g.out_pixels());
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * np;
    let mut out = vec![0.0; g.batch * out_len];
    let mut col = vec![0.0; kp * np];
    for b in 0..g.batch {
        let dst = &mut out[b * out_len..(b + 1) * out_len];
        for (o, plane) in dst.chunks_exact_mut(np).enumerate() {
            plane.fill(bias[o]);
        }
        im2col(g, &x[b * in_len..(b + 1) * in_len], &mut col);
        gemm(g.out_channels, kp, np, kernel, (kp, 1), &col, (np, 1), 1.0, dst);
    }
    out
}

/// Gradients of a convolution with respect to its input, kernel and bias.
/// Gradients not requested come back empty.
pub fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f64],
    kernel: &[f64],
    dout: &[f64],
    need_input: bool,
    need_params: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (kp, np) = (g.patch_len(), g.out_pixels());
    let in_len = g.in_channels * g.height * g.width;
    let out_len = g.out_channels * np;
    let mut dx = if need_input { vec![0.0; g.batch * in_len] } else { Vec::new() };
    let mut dk = if need_params { vec![0.0; g.out_channels * kp] } else { Vec::new() };
    let mut db = if need_params { vec![0.0; g.out_channels] } else { Vec::new() };
    let mut col = vec![0.0; kp * np];
    for b in 0..g.batch {
        let go = &dout[b * out_len..(b + 1) * out_len];
        if need_params {
            im2col(g, &x[b * in_len..(b + 1) * in_len], &mut col);
            // dK += dOut * col^T
            gemm(g.out_channels, np, kp, go, (np, 1), &col, (1, np), 1.0, &mut dk);
            for (o, plane) in go.chunks_exact(np).enumerate() {
                db[o] += plane.iter().sum::<f64>();
            }
        }
        if need_input {
            // dcol = K^T * dOut
            gemm(kp, g.out_channels, np, kernel, (1, kp), go, (np, 1), 0.0, &mut col);
            col2im_add(g, &col, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    (dx, dk, db)
}

/// Direct nested-loop cross-correlation, kept as the slow reference path.
pub fn conv2d_reference(g: &ConvGeometry, x: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.batch * g.out_channels * oh * ow];
    for b in 0..g.batch {
        for o in 0..g.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..g.in_channels {
                        for ky in 0..g.kernel_h {
                            for kx in 0..g.kernel_w {
                                let iy = (oy + ky) as isize - g.padding as isize;
                                let ix = (ox + kx) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= g.height as isize || ix >= g.width as isize {
                                    continue;
                                }
                                let xi = ((b * g.in_channels + c) * g.height + iy as usize) * g.width + ix as usize;
                                let ki = ((o * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w + kx;
                                acc += x[xi] * kernel[ki];
                            }
                        }
                    }
                    out[((b * g.out_channels + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_channel_mismatch_and_even_kernels() {
        assert!(matches!(ConvGeometry::new(&[1, 2, 4, 4], &[3, 3, 3, 3], 1), Err(Error::Dimension(_))));
        assert!(matches!(ConvGeometry::new(&[1, 2, 4, 4], &[3, 2, 2, 2], 1), Err(Error::Domain(_))));
    }

    #[test]
    fn same_padding_keeps_extent() {
        let g = ConvGeometry::new(&[2, 3, 5, 7], &[4, 3, 3, 3], 1).unwrap();
        assert_eq!(g.out_shape(), [2, 4, 5, 7]);
        let g = ConvGeometry::new(&[2, 3, 5, 7], &[4, 3, 1, 1], 0).unwrap();
        assert_eq!(g.out_shape(), [2, 4, 5, 7]);
    }
}
