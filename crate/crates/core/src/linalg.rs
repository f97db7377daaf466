//! Dense row-major kernels shared by the model, generic over `f32`/`f64`.

use std::fmt::Debug;

use num_traits::Float;

pub trait Scalar: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    /// `C = alpha * A·B + beta * C` on raw strided storage.
    ///
    /// # Safety
    /// Pointers and strides must describe in-bounds `m×k`, `k×n`, `m×n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize, alpha: Self,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self, c: *mut Self, rsc: isize, csc: isize,
    );

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize, alpha: f32,
        a: *const f32, rsa: isize, csa: isize,
        b: *const f32, rsb: isize, csb: isize,
        beta: f32, c: *mut f32, rsc: isize, csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize, alpha: f64,
        a: *const f64, rsa: isize, csa: isize,
        b: *const f64, rsb: isize, csb: isize,
        beta: f64, c: *mut f64, rsc: isize, csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}

/// A row-major matrix view: `rows × cols` starting at `offset` with row stride `ld`.
#[derive(Clone, Copy, Debug)]
pub struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub ld: usize,
}

impl View {
    pub fn full(rows: usize, cols: usize) -> Self {
        Self { offset: 0, rows, cols, ld: cols }
    }

    /// Column block `[c0, c0 + width)` of rows `[r0, r0 + height)` in a matrix with `ld` columns.
    pub fn block(r0: usize, height: usize, c0: usize, width: usize, ld: usize) -> Self {
        Self { offset: r0 * ld + c0, rows: height, cols: width, ld }
    }

    fn last(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            self.offset
        } else {
            self.offset + (self.rows - 1) * self.ld + self.cols
        }
    }
}

/// `C = alpha * op(A)·op(B) + beta * C` where `op` optionally transposes.
/// Views describe the stored (untransposed) matrices.
#[allow(clippy::too_many_arguments)]
pub fn gemm<S: Scalar>(
    alpha: S,
    a: &[S], av: View, ta: bool,
    b: &[S], bv: View, tb: bool,
    beta: S,
    c: &mut [S], cv: View,
) {
    let (m, k) = if ta { (av.cols, av.rows) } else { (av.rows, av.cols) };
    let (k2, n) = if tb { (bv.cols, bv.rows) } else { (bv.rows, bv.cols) };
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!((cv.rows, cv.cols), (m, n), "output shape mismatch");
    assert!(av.last() <= a.len() && bv.last() <= b.len() && cv.last() <= c.len());
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for r in 0..m {
            for x in &mut c[cv.offset + r * cv.ld..cv.offset + r * cv.ld + n] {
                *x = if beta == S::zero() { S::zero() } else { *x * beta };
            }
        }
        return;
    }
    let (rsa, csa) = if ta { (1, av.ld as isize) } else { (av.ld as isize, 1) };
    let (rsb, csb) = if tb { (1, bv.ld as isize) } else { (bv.ld as isize, 1) };
    // SAFETY: the asserts above bound every accessed element of all three views.
    unsafe {
        S::gemm_raw(
            m, k, n, alpha,
            a.as_ptr().add(av.offset), rsa, csa,
            b.as_ptr().add(bv.offset), rsb, csb,
            beta, c.as_mut_ptr().add(cv.offset), cv.ld as isize, 1,
        );
    }
}

/// `[m×k]·[k×n]` (or with transposes) into a fresh buffer.
pub fn matmul<S: Scalar>(a: &[S], m: usize, k: usize, ta: bool, b: &[S], n: usize, tb: bool) -> Vec<S> {
    let av = if ta { View::full(k, m) } else { View::full(m, k) };
    let bv = if tb { View::full(n, k) } else { View::full(k, n) };
    let mut c = vec![S::zero(); m * n];
    gemm(S::one(), a, av, ta, b, bv, tb, S::zero(), &mut c, View::full(m, n));
    c
}
