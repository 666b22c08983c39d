//! Dense kernels behind the differentiable ops.
//!
//! Every reduction runs in a fixed order (eight interleaved partial sums,
//! combined pairwise) so results are bit-reproducible for a given shape.

use crate::tensor::Real;

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::ZERO; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (x, y) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::ZERO;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn sum<T: Real>(a: &[T]) -> T {
    let mut acc = [T::ZERO; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let x = &a[i * 8..i * 8 + 8];
        for l in 0..8 {
            acc[l] += x[l];
        }
    }
    let mut tail = T::ZERO;
    for &v in &a[chunks * 8..] {
        tail += v;
    }
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_strided(m, k, n, a, k, 1, b, c);
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    let mut bt = vec![T::ZERO; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    gemm_strided(m, k, n, a, k, 1, &bt, c);
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    gemm_strided(m, k, n, a, 1, m, b, c);
}

const MR: usize = 4;
const NR: usize = 8;
const KC: usize = 256;
const NC: usize = 512;

// `c += A·b` with `A[i][p] = a[i·rs + p·cs]`. Every output accumulates over `p` in
// increasing order, so tiling does not change results.
// AVX2 only widens the vectors; without fused multiply-add the results are identical.
#[allow(clippy::too_many_arguments)]
fn gemm_strided<T: Real>(m: usize, k: usize, n: usize, a: &[T], rs: usize, cs: usize, b: &[T], c: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { gemm_strided_avx2(m, k, n, a, rs, cs, b, c) };
            return;
        }
    }
    gemm_strided_body(m, k, n, a, rs, cs, b, c);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_strided_avx2<T: Real>(m: usize, k: usize, n: usize, a: &[T], rs: usize, cs: usize, b: &[T], c: &mut [T]) {
    gemm_strided_body(m, k, n, a, rs, cs, b, c);
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gemm_strided_body<T: Real>(m: usize, k: usize, n: usize, a: &[T], rs: usize, cs: usize, b: &[T], c: &mut [T]) {
    let (m4, n8) = (m - m % MR, n - n % NR);
    for jc in (0..n8).step_by(NC) {
        let jend = (jc + NC).min(n8);
        for pc in (0..k).step_by(KC) {
            let pend = (pc + KC).min(k);
            for i in (0..m4).step_by(MR) {
                for j in (jc..jend).step_by(NR) {
                    let mut acc = [[T::ZERO; NR]; MR];
                    for (r, row) in acc.iter_mut().enumerate() {
                        row.copy_from_slice(&c[(i + r) * n + j..(i + r) * n + j + NR]);
                    }
                    for p in pc..pend {
                        let bp: &[T; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
                        for (r, row) in acc.iter_mut().enumerate() {
                            let av = a[(i + r) * rs + p * cs];
                            for l in 0..NR {
                                row[l] += av * bp[l];
                            }
                        }
                    }
                    for (r, row) in acc.iter().enumerate() {
                        c[(i + r) * n + j..(i + r) * n + j + NR].copy_from_slice(row);
                    }
                }
            }
        }
    }
    for i in (0..m4).step_by(MR) {
        for r in 0..MR {
            let row = &mut c[(i + r) * n..(i + r + 1) * n];
            for p in 0..k {
                let av = a[(i + r) * rs + p * cs];
                for (cv, &bv) in row[n8..].iter_mut().zip(&b[p * n + n8..(p + 1) * n]) {
                    *cv += av * bv;
                }
            }
        }
    }
    for i in m4..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * rs + p * cs];
            if av != T::ZERO {
                axpy(row, av, &b[p * n..(p + 1) * n]);
            }
        }
    }
}

/// Geometry of a strided, zero-padded square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || height + 2 * pad < kernel || width + 2 * pad < kernel {
            return None;
        }
        Some(ConvGeom {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Valid output-column range `[lo, hi)` for kernel column `kx`.
    #[inline]
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kx as isize - self.pad as isize;
        // ox*s + off in [0, width)
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_num = self.width as isize - 1 - off;
        let hi = if hi_num < 0 { 0 } else { (hi_num / s + 1).min(self.out_w as isize) };
        (lo as usize, (hi.max(lo)) as usize)
    }
}

/// Unfolds one image `[C, H, W]` into `[C·k·k, out_h·out_w]` patches.
pub fn im2col<T: Real>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    cols.fill(T::ZERO);
    im2col_at(g, img, cols, g.col_cols(), 0);
}

/// Unfolds a batch `[B, C, H, W]` into `[C·k·k, B·out_h·out_w]`, images side by side.
pub fn im2col_batch<T: Real>(g: &ConvGeom, imgs: &[T], bn: usize) -> Vec<T> {
    let (ncol, plane) = (g.col_cols(), g.channels * g.height * g.width);
    let ld = bn * ncol;
    let mut cols = vec![T::ZERO; g.col_rows() * ld];
    for bi in 0..bn {
        im2col_at(g, &imgs[bi * plane..(bi + 1) * plane], &mut cols, ld, bi * ncol);
    }
    cols
}

// Writes patch row `r` to `cols[r·ld + off ..]`; untouched entries stay as they are.
fn im2col_at<T: Real>(g: &ConvGeom, img: &[T], cols: &mut [T], ld: usize, off: usize) {
    let (k, s) = (g.kernel, g.stride);
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * ld + off;
                let (lo, hi) = g.ox_range(kx);
                for oy in 0..g.out_h {
                    let iy = (oy * s + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let dst = &mut cols[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    for ox in lo..hi {
                        dst[ox] = src[ox * s + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patches back into `[C, H, W]`.
pub fn col2im<T: Real>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    col2im_at(g, cols, g.col_cols(), 0, img);
}

/// Adjoint of [`im2col_batch`].
pub fn col2im_batch<T: Real>(g: &ConvGeom, cols: &[T], bn: usize, imgs: &mut [T]) {
    let (ncol, plane) = (g.col_cols(), g.channels * g.height * g.width);
    for bi in 0..bn {
        col2im_at(g, cols, bn * ncol, bi * ncol, &mut imgs[bi * plane..(bi + 1) * plane]);
    }
}

fn col2im_at<T: Real>(g: &ConvGeom, cols: &[T], ld: usize, off: usize, img: &mut [T]) {
    let (k, s) = (g.kernel, g.stride);
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * ld + off;
                let (lo, hi) = g.ox_range(kx);
                for oy in 0..g.out_h {
                    let iy = (oy * s + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let src = &cols[row + oy * g.out_w..row + (oy + 1) * g.out_w];
                    for ox in lo..hi {
                        dst[ox * s + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

/// `[B, C, P]` to `[C, B·P]`.
pub fn batch_to_channel_major<T: Real>(x: &[T], bn: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for bi in 0..bn {
        for ch in 0..c {
            out[ch * bn * p + bi * p..][..p].copy_from_slice(&x[(bi * c + ch) * p..][..p]);
        }
    }
    out
}

/// `[C, B·P]` to `[B, C, P]`.
pub fn channel_major_to_batch<T: Real>(x: &[T], bn: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for bi in 0..bn {
        for ch in 0..c {
            out[(bi * c + ch) * p..][..p].copy_from_slice(&x[ch * bn * p + bi * p..][..p]);
        }
    }
    out
}

/// Standard normal CDF in f64.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}
