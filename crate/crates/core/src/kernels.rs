//! Lowered (im2col) convolution kernels shared by `conv2d` and its transpose.
//!
//! Both ops are expressed against one geometry: a strided, dilated
//! cross-correlation maps the "wide" image `(n, c_wide, h_wide, w_wide)` onto
//! the "narrow" image `(n, c_narrow, h_narrow, w_narrow)` with weight
//! `(c_narrow, c_wide, k, k)`. `conv2d` runs it forward, the transpose runs
//! its adjoint.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub n: usize,
    pub c_wide: usize,
    pub h_wide: usize,
    pub w_wide: usize,
    pub c_narrow: usize,
    pub h_narrow: usize,
    pub w_narrow: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
}

/// Effective spatial extent of a dilated kernel.
pub fn effective_kernel(k: usize, dilation: usize) -> usize {
    dilation * (k - 1) + 1
}

/// Output extent of a cross-correlation, `None` when it would be empty.
pub fn conv_out_size(size: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> Option<usize> {
    let keff = effective_kernel(k, dilation);
    let padded = size + 2 * pad;
    if padded < keff || stride == 0 {
        return None;
    }
    Some((padded - keff) / stride + 1)
}

/// Output extent of the transposed op, `None` when non-positive.
pub fn conv_transpose_out_size(size: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> Option<usize> {
    let grown = (size - 1) * stride + effective_kernel(k, dilation);
    grown.checked_sub(2 * pad).filter(|&v| v > 0)
}

impl ConvShape {
    fn patch(&self) -> usize {
        self.c_wide * self.k * self.k
    }

    fn narrow_plane(&self) -> usize {
        self.h_narrow * self.w_narrow
    }

    fn cols_width(&self) -> usize {
        self.n * self.narrow_plane()
    }

    /// Visits `(column, wide index)` pairs for every in-bounds tap of patch row `row`.
    #[inline]
    fn for_each_tap(&self, row: usize, mut f: impl FnMut(usize, usize)) {
        let kj = row % self.k;
        let ki = (row / self.k) % self.k;
        let ci = row / (self.k * self.k);
        let plane = self.narrow_plane();
        for b in 0..self.n {
            let wide_base = (b * self.c_wide + ci) * self.h_wide * self.w_wide;
            for oy in 0..self.h_narrow {
                let iy = (oy * self.stride + ki * self.dilation) as isize - self.pad as isize;
                if iy < 0 || iy >= self.h_wide as isize {
                    continue;
                }
                let col_row = b * plane + oy * self.w_narrow;
                let wide_row = wide_base + iy as usize * self.w_wide;
                for ox in 0..self.w_narrow {
                    let ix = (ox * self.stride + kj * self.dilation) as isize - self.pad as isize;
                    if ix < 0 || ix >= self.w_wide as isize {
                        continue;
                    }
                    f(col_row + ox, wide_row + ix as usize);
                }
            }
        }
    }

    /// im2col: `(patch, n * narrow_plane)` matrix of the wide image.
    pub fn lower<T: Scalar>(&self, wide: &[T]) -> Vec<T> {
        let width = self.cols_width();
        let mut cols = vec![T::zero(); self.patch() * width];
        for row in 0..self.patch() {
            let dst = &mut cols[row * width..(row + 1) * width];
            self.for_each_tap(row, |c, i| dst[c] = wide[i]);
        }
        cols
    }

    /// col2im: scatters-adds a lowered matrix back onto a wide image.
    pub fn raise<T: Scalar>(&self, cols: &[T]) -> Vec<T> {
        let width = self.cols_width();
        let mut wide = vec![T::zero(); self.n * self.c_wide * self.h_wide * self.w_wide];
        for row in 0..self.patch() {
            let src = &cols[row * width..(row + 1) * width];
            self.for_each_tap(row, |c, i| wide[i] += src[c]);
        }
        wide
    }

    /// `(n, c_narrow, plane)` → `(c_narrow, n * plane)`.
    pub fn narrow_to_rows<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let plane = self.narrow_plane();
        let mut out = vec![T::zero(); x.len()];
        for b in 0..self.n {
            for c in 0..self.c_narrow {
                let src = &x[(b * self.c_narrow + c) * plane..][..plane];
                out[c * self.n * plane + b * plane..][..plane].copy_from_slice(src);
            }
        }
        out
    }

    /// Inverse of [`narrow_to_rows`](Self::narrow_to_rows).
    pub fn rows_to_narrow<T: Scalar>(&self, rows: &[T]) -> Vec<T> {
        let plane = self.narrow_plane();
        let mut out = vec![T::zero(); rows.len()];
        for b in 0..self.n {
            for c in 0..self.c_narrow {
                let src = &rows[c * self.n * plane + b * plane..][..plane];
                out[(b * self.c_narrow + c) * plane..][..plane].copy_from_slice(src);
            }
        }
        out
    }

    /// Cross-correlation wide → narrow.
    pub fn correlate<T: Scalar>(&self, wide: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
        let cols = self.lower(wide);
        let mut rows = vec![T::zero(); self.c_narrow * self.cols_width()];
        T::gemm(self.c_narrow, self.patch(), self.cols_width(), T::one(), weight, false, &cols, false, T::zero(), &mut rows);
        let mut out = self.rows_to_narrow(&rows);
        if let Some(b) = bias {
            add_channel_bias(&mut out, b, self.narrow_plane());
        }
        out
    }

    /// Gradients of [`correlate`](Self::correlate): `(d_wide, d_weight)`.
    pub fn correlate_backward<T: Scalar>(&self, wide: &[T], weight: &[T], d_narrow: &[T], need_wide: bool) -> (Option<Vec<T>>, Vec<T>) {
        let dy = self.narrow_to_rows(d_narrow);
        let cols = self.lower(wide);
        let mut dw = vec![T::zero(); weight.len()];
        T::gemm(self.c_narrow, self.cols_width(), self.patch(), T::one(), &dy, false, &cols, true, T::zero(), &mut dw);
        let dx = need_wide.then(|| {
            let mut dcols = vec![T::zero(); cols.len()];
            T::gemm(self.patch(), self.c_narrow, self.cols_width(), T::one(), weight, true, &dy, false, T::zero(), &mut dcols);
            self.raise(&dcols)
        });
        (dx, dw)
    }

    /// Adjoint of the cross-correlation: narrow → wide.
    pub fn correlate_adjoint<T: Scalar>(&self, narrow: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
        let x = self.narrow_to_rows(narrow);
        let mut cols = vec![T::zero(); self.patch() * self.cols_width()];
        T::gemm(self.patch(), self.c_narrow, self.cols_width(), T::one(), weight, true, &x, false, T::zero(), &mut cols);
        let mut out = self.raise(&cols);
        if let Some(b) = bias {
            add_channel_bias(&mut out, b, self.h_wide * self.w_wide);
        }
        out
    }

    /// Gradients of [`correlate_adjoint`](Self::correlate_adjoint): `(d_narrow, d_weight)`.
    pub fn correlate_adjoint_backward<T: Scalar>(&self, narrow: &[T], weight: &[T], d_wide: &[T], need_narrow: bool) -> (Option<Vec<T>>, Vec<T>) {
        let dcols = self.lower(d_wide);
        let x = self.narrow_to_rows(narrow);
        let mut dw = vec![T::zero(); weight.len()];
        T::gemm(self.c_narrow, self.cols_width(), self.patch(), T::one(), &x, false, &dcols, true, T::zero(), &mut dw);
        let dx = need_narrow.then(|| {
            let mut rows = vec![T::zero(); self.c_narrow * self.cols_width()];
            T::gemm(self.c_narrow, self.patch(), self.cols_width(), T::one(), weight, false, &dcols, false, T::zero(), &mut rows);
            self.rows_to_narrow(&rows)
        });
        (dx, dw)
    }
}

pub(crate) fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    let c = bias.len();
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        let b = bias[i % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

pub(crate) fn channel_sums<T: Scalar>(x: &[T], channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); channels];
    for (i, chunk) in x.chunks(plane).enumerate() {
        out[i % channels] += chunk.iter().copied().sum::<T>();
    }
    out
}
