//! Dense kernels shared by the tape operations: a safe GEMM wrapper and
//! im2col-based 2-D convolution with "same" zero padding.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

/// Row-major matrix view with an optional logical transpose.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out (m×n) = beta·out + a (m×k) · b (k×n)`.
pub(crate) fn gemm<T: Real>(a: Mat<'_, T>, b: Mat<'_, T>, out: &mut [T], beta: T) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!(out.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: both operands were checked to hold exactly rows×cols values and
    // the strides describe a dense row-major layout (or its transpose), so every
    // index touched by the kernel lies inside the slices; `out` holds m×n values.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Upper bound on im2col elements materialized at once by [`ConvGeom::forward`].
const FORWARD_BAND_ELEMS: usize = 1 << 22;

/// Geometry of a "same"-padded convolution on an `H × W × C` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub cin: usize,
    pub cout: usize,
    pub ksize: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.height.div_ceil(self.stride)
    }

    pub fn out_w(&self) -> usize {
        self.width.div_ceil(self.stride)
    }

    fn pad(&self) -> isize {
        (self.ksize as isize - 1) / 2
    }

    fn patch_len(&self) -> usize {
        self.ksize * self.ksize * self.cin
    }

    /// Calls `f(out_pixel, patch_offset, in_pixel)` for every in-bounds tap of
    /// output rows `y0..y1`; `out_pixel` counts from the start of row `y0`.
    #[inline]
    fn for_each_tap_rows(&self, y0: usize, y1: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (ow, pad) = (self.out_w(), self.pad());
        for oy in y0..y1 {
            for ox in 0..ow {
                let op = (oy - y0) * ow + ox;
                for ky in 0..self.ksize {
                    let iy = (oy * self.stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= self.height as isize {
                        continue;
                    }
                    for kx in 0..self.ksize {
                        let ix = (ox * self.stride) as isize + kx as isize - pad;
                        if ix < 0 || ix >= self.width as isize {
                            continue;
                        }
                        let ip = iy as usize * self.width + ix as usize;
                        f(op, (ky * self.ksize + kx) * self.cin, ip);
                    }
                }
            }
        }
    }

    fn for_each_tap(&self, f: impl FnMut(usize, usize, usize)) {
        self.for_each_tap_rows(0, self.out_h(), f)
    }

    fn im2col_rows<T: Real>(&self, x: &[T], y0: usize, y1: usize) -> Vec<T> {
        let plen = self.patch_len();
        let cin = self.cin;
        let mut cols = vec![T::zero(); (y1 - y0) * self.out_w() * plen];
        self.for_each_tap_rows(y0, y1, |op, off, ip| {
            let dst = op * plen + off;
            cols[dst..dst + cin].copy_from_slice(&x[ip * cin..ip * cin + cin]);
        });
        cols
    }

    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        self.im2col_rows(x, 0, self.out_h())
    }

    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let plen = self.patch_len();
        let cin = self.cin;
        self.for_each_tap(|op, off, ip| {
            let src = op * plen + off;
            for (d, s) in dx[ip * cin..ip * cin + cin]
                .iter_mut()
                .zip(&cols[src..src + cin])
            {
                *d += *s;
            }
        });
    }

    pub fn forward<T: Real>(&self, x: &[T], weight: &[T], bias: &[T]) -> Vec<T> {
        self.forward_banded(x, weight, bias, FORWARD_BAND_ELEMS)
    }

    fn forward_banded<T: Real>(
        &self,
        x: &[T],
        weight: &[T],
        bias: &[T],
        band_elems: usize,
    ) -> Vec<T> {
        let pixels = self.out_h() * self.out_w();
        let mut out = Vec::with_capacity(pixels * self.cout);
        for _ in 0..pixels {
            out.extend_from_slice(bias);
        }
        if self.ksize == 1 && self.stride == 1 {
            let xm = Mat::new(x, pixels, self.cin);
            gemm(
                xm,
                Mat::new(weight, self.cin, self.cout),
                &mut out,
                T::one(),
            );
            return out;
        }
        // Bands of output rows bound the im2col buffer on large images.
        let plen = self.patch_len();
        let band = (band_elems / (self.out_w() * plen).max(1)).max(1);
        let wm = Mat::new(weight, plen, self.cout);
        let mut y0 = 0;
        while y0 < self.out_h() {
            let y1 = (y0 + band).min(self.out_h());
            let cols = self.im2col_rows(x, y0, y1);
            let rows = (y1 - y0) * self.out_w();
            let dst = &mut out[y0 * self.out_w() * self.cout..y1 * self.out_w() * self.cout];
            gemm(Mat::new(&cols, rows, plen), wm, dst, T::one());
            y0 = y1;
        }
        out
    }

    /// Gradient with respect to the input image.
    pub fn backward_input<T: Real>(&self, dout: &[T], weight: &[T]) -> Vec<T> {
        let pixels = self.out_h() * self.out_w();
        let plen = self.patch_len();
        let dm = Mat::new(dout, pixels, self.cout);
        let wm = Mat::new(weight, plen, self.cout).t();
        if self.ksize == 1 && self.stride == 1 {
            let mut dx = vec![T::zero(); pixels * self.cin];
            gemm(dm, wm, &mut dx, T::zero());
            return dx;
        }
        let mut dcols = vec![T::zero(); pixels * plen];
        gemm(dm, wm, &mut dcols, T::zero());
        let mut dx = vec![T::zero(); self.height * self.width * self.cin];
        self.col2im(&dcols, &mut dx);
        dx
    }

    /// Gradient with respect to the kernel, accumulated into `dweight`.
    pub fn backward_weight<T: Real>(&self, dout: &[T], x: &[T], dweight: &mut [T]) {
        let pixels = self.out_h() * self.out_w();
        let dm = Mat::new(dout, pixels, self.cout);
        if self.ksize == 1 && self.stride == 1 {
            gemm(Mat::new(x, pixels, self.cin).t(), dm, dweight, T::one());
        } else {
            let cols = self.im2col(x);
            gemm(
                Mat::new(&cols, pixels, self.patch_len()).t(),
                dm,
                dweight,
                T::one(),
            );
        }
    }

    pub fn backward_bias<T: Real>(&self, dout: &[T], dbias: &mut [T]) {
        for px in dout.chunks_exact(self.cout) {
            for (b, g) in dbias.iter_mut().zip(px) {
                *b += *g;
            }
        }
    }
}
