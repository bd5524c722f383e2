//! Low-level numeric kernels shared by the forward and backward rules.

use alloc::vec;
use alloc::vec::Vec;

/// `c[m×n] (+)= op(a)[m×k] · op(b)[k×n]`.
///
/// `op(a)` is `a` stored `[m×k]`, or `aᵀ` of a buffer stored `[k×m]` when `ta`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: strides describe exactly the buffers checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every output position of `permute(shape, axes)`, the source offset.
pub(crate) fn permute_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let numel: usize = shape.iter().product();
    let mut index = Vec::with_capacity(numel);
    let nd = out_shape.len();
    if nd == 0 {
        index.push(0);
        return index;
    }
    let step: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let mut counter = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..numel {
        index.push(off);
        let mut d = nd;
        while d > 0 {
            d -= 1;
            counter[d] += 1;
            off += step[d];
            if counter[d] < out_shape[d] {
                break;
            }
            off -= step[d] * out_shape[d];
            counter[d] = 0;
        }
    }
    index
}

/// Geometry of a 2-D convolution over a `[B, C, H, W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub(crate) fn col_width(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub(crate) fn col_rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// Source offset in the input for column entry (row, col), or `None` in padding.
    fn source(&self, b: usize, oy: usize, ox: usize, c: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            return None;
        }
        Some(((b * self.in_ch + c) * self.height + y as usize) * self.width + x as usize)
    }
}

/// Unfolds `[B, C, H, W]` into `[B·H'·W', C·kh·kw]` patch rows.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let width = g.col_width();
    let mut cols = vec![0.0; g.col_rows() * width];
    let mut row = 0;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut cols[row * width..(row + 1) * width];
                let mut j = 0;
                for c in 0..g.in_ch {
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            if let Some(src) = g.source(b, oy, ox, c, ky, kx) {
                                dst[j] = x[src];
                            }
                            j += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch-row gradients back onto the input.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let width = g.col_width();
    let mut row = 0;
    for b in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &cols[row * width..(row + 1) * width];
                let mut j = 0;
                for c in 0..g.in_ch {
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            if let Some(dst) = g.source(b, oy, ox, c, ky, kx) {
                                dx[dst] += src[j];
                            }
                            j += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}
