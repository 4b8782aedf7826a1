//! Scalar types the tensors and the tape can hold.
//!
//! Training and inference run in `f32`; `f64` exists so gradient checks can
//! resolve finite differences far below `f32` rounding.

use core::fmt::Debug;
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

pub trait Real:
    Float
    + Debug
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    fn lit(v: f32) -> Self;
    fn of_f64(v: f64) -> Self;
    fn count(n: usize) -> Self;
    fn as_f32(self) -> f32;
    fn as_f64(self) -> f64;

    /// `c (m×n) = beta·c + a·b` on raw strided storage.
    ///
    /// # Safety
    /// The pointers and strides must describe in-bounds `m×k`, `k×n` and `m×n` arrays.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn lit(v: f32) -> Self {
        v
    }

    fn of_f64(v: f64) -> Self {
        v as f32
    }

    fn count(n: usize) -> Self {
        n as f32
    }

    fn as_f32(self) -> f32 {
        self
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn lit(v: f32) -> Self {
        v as f64
    }

    fn of_f64(v: f64) -> Self {
        v
    }

    fn count(n: usize) -> Self {
        n as f64
    }

    fn as_f32(self) -> f32 {
        self as f32
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}
