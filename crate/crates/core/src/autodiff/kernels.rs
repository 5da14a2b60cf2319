//! Dense compute kernels shared by the tape ops.
//!
//! Every output element of [`gemm_acc`] is accumulated in increasing `k`
//! order starting from zero, the same order a naive triple loop uses, so
//! convolution results match a direct six-loop evaluation exactly.

use rayon::prelude::*;

use super::Real;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
pub fn gemm_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// Row-major transpose of an `rows×cols` matrix.
pub fn transpose<T: Real>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel_w) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_pixels()
    }

    /// Unfolds one `[C, H, W]` image into a `[C·kh·kw, out_h·out_w]` matrix.
    pub fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let pixels = oh * ow;
        let mut cols = vec![T::zero(); self.patch_len() * pixels];
        for c in 0..self.in_channels {
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    let dst = &mut cols[row * pixels..(row + 1) * pixels];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let src_row = (c * self.in_h + iy as usize) * self.in_w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && (ix as usize) < self.in_w {
                                dst[oy * ow + ox] = x[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`Self::im2col`]: folds patch gradients back onto the image.
    pub fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let pixels = oh * ow;
        for c in 0..self.in_channels {
            for ky in 0..self.kernel_h {
                for kx in 0..self.kernel_w {
                    let row = (c * self.kernel_h + ky) * self.kernel_w + kx;
                    let src = &cols[row * pixels..(row + 1) * pixels];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let dst_row = (c * self.in_h + iy as usize) * self.in_w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && (ix as usize) < self.in_w {
                                dx[dst_row + ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution forward. Returns the output and the per-sample
/// unfolded inputs for reuse in backward.
pub fn conv2d_forward<T: Real>(
    geom: &ConvGeometry,
    batch: usize,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> (Vec<T>, Vec<Vec<T>>) {
    let in_len = geom.in_len();
    let out_len = geom.out_len();
    let pixels = geom.out_pixels();
    let results: Vec<(Vec<T>, Vec<T>)> = (0..batch)
        .into_par_iter()
        .map(|n| {
            let cols = geom.im2col(&x[n * in_len..(n + 1) * in_len]);
            let mut out = vec![T::zero(); out_len];
            gemm_acc(geom.out_channels, geom.patch_len(), pixels, weight, &cols, &mut out);
            if let Some(b) = bias {
                for (o, &bv) in b.iter().enumerate() {
                    for v in &mut out[o * pixels..(o + 1) * pixels] {
                        *v += bv;
                    }
                }
            }
            (out, cols)
        })
        .collect();
    let mut y = Vec::with_capacity(batch * out_len);
    let mut all_cols = Vec::with_capacity(batch);
    for (out, cols) in results {
        y.extend_from_slice(&out);
        all_cols.push(cols);
    }
    (y, all_cols)
}

pub struct ConvGrads<T> {
    pub dx: Vec<T>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

/// Batched convolution backward. Per-sample weight gradients are reduced in
/// sample order so the result does not depend on the thread count.
pub fn conv2d_backward<T: Real>(
    geom: &ConvGeometry,
    batch: usize,
    cols: &[Vec<T>],
    weight: &[T],
    grad_out: &[T],
    need_dx: bool,
) -> ConvGrads<T> {
    let pixels = geom.out_pixels();
    let patch = geom.patch_len();
    let out_len = geom.out_len();
    let in_len = geom.in_len();
    let w_t = transpose(geom.out_channels, patch, weight);
    let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..batch)
        .into_par_iter()
        .map(|n| {
            let g = &grad_out[n * out_len..(n + 1) * out_len];
            let cols_t = transpose(patch, pixels, &cols[n]);
            let mut dw = vec![T::zero(); geom.out_channels * patch];
            gemm_acc(geom.out_channels, pixels, patch, g, &cols_t, &mut dw);
            let db: Vec<T> = (0..geom.out_channels)
                .map(|o| g[o * pixels..(o + 1) * pixels].iter().copied().sum())
                .collect();
            let mut dx = Vec::new();
            if need_dx {
                let mut dcols = vec![T::zero(); patch * pixels];
                gemm_acc(patch, geom.out_channels, pixels, &w_t, g, &mut dcols);
                dx = vec![T::zero(); in_len];
                geom.col2im(&dcols, &mut dx);
            }
            (dx, dw, db)
        })
        .collect();
    let mut dw = vec![T::zero(); geom.out_channels * patch];
    let mut db = vec![T::zero(); geom.out_channels];
    let mut dx = Vec::with_capacity(if need_dx { batch * in_len } else { 0 });
    for (sx, sw, sb) in per_sample {
        for (a, b) in dw.iter_mut().zip(&sw) {
            *a += *b;
        }
        for (a, b) in db.iter_mut().zip(&sb) {
            *a += *b;
        }
        dx.extend_from_slice(&sx);
    }
    ConvGrads { dx, dw, db }
}
