//! Raw numeric kernels behind the graph primitives.
//!
//! Pure functions over slices; the graph layer owns shape checking and
//! differentiation. Loop orders are fixed so accumulation is deterministic.

use crate::tensor::Scalar;

/// C[m x p] += A[m x k] * B[k x p], row-major. The ikj order keeps the inner
/// loop on contiguous rows of B and C.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, p: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(c.len(), m * p);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * p..(i + 1) * p];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let b_row = &b[kk * p..(kk + 1) * p];
            for (cv, &bv) in c_row.iter_mut().zip(b_row.iter()) {
                *cv += aik * bv;
            }
        }
    }
}

pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, p: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * p];
    matmul_acc(a, b, &mut c, m, k, p);
    c
}

/// Row-major transpose of an m x n matrix.
pub fn transpose<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Option<usize> {
    let span = dilation.checked_mul(kernel.checked_sub(1)?)? + 1;
    let padded = input + 2 * pad;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Geometry of one conv application (single image plane set).
#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }
    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfold one image (c_in * h * w, channel-major) into a patch matrix of
/// shape [c_in*k*k, out_h*out_w]. Out-of-bounds taps read as zero.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    debug_assert_eq!(x.len(), g.c_in * g.h * g.w);
    debug_assert_eq!(col.len(), g.patch_len() * g.out_len());
    let out_len = g.out_len();
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (ci * g.k + kh) * g.k + kw;
                let dst = &mut col[row * out_len..(row + 1) * out_len];
                let dy = (kh * g.dilation) as isize - g.pad as isize;
                let dx = (kw * g.dilation) as isize - g.pad as isize;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride) as isize + dy;
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        for v in dst_row.iter_mut() {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride) as isize + dx;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold a patch-matrix gradient back onto the image: scatter-add inverse of
/// `im2col`, visiting taps in the same fixed order.
pub fn col2im_acc<T: Scalar>(col: &[T], g: &ConvGeom, x_grad: &mut [T]) {
    debug_assert_eq!(x_grad.len(), g.c_in * g.h * g.w);
    debug_assert_eq!(col.len(), g.patch_len() * g.out_len());
    let out_len = g.out_len();
    for ci in 0..g.c_in {
        let plane = &mut x_grad[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for kh in 0..g.k {
            for kw in 0..g.k {
                let row = (ci * g.k + kh) * g.k + kw;
                let src = &col[row * out_len..(row + 1) * out_len];
                let dy = (kh * g.dilation) as isize - g.pad as isize;
                let dx = (kw * g.dilation) as isize - g.pad as isize;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride) as isize + dy;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &v) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride) as isize + dx;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Per-row softmax with max subtraction. `a` is rows x cols, overwritten in
/// place is avoided: result returned.
pub fn softmax_rows<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let src = &a[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        let m = src.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (d, &s) in dst.iter_mut().zip(src.iter()) {
            *d = (s - m).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d = *d / sum;
        }
    }
    out
}

/// Sampling weights for one output coordinate under the half-pixel-center
/// convention with clamp-to-edge: returns (i0, i1, w1) meaning
/// `out = (1-w1)*src[i0] + w1*src[i1]`.
#[inline]
pub fn bilinear_taps(out_idx: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    if in_len == 1 {
        return (0, 0, 0.0);
    }
    let scale = in_len as f64 / out_len as f64;
    let src = (out_idx as f64 + 0.5) * scale - 0.5;
    let floor = src.floor();
    let frac = src - floor;
    let i0 = floor.max(0.0).min((in_len - 1) as f64) as usize;
    let i1 = (floor + 1.0).max(0.0).min((in_len - 1) as f64) as usize;
    (i0, i1, frac)
}
