//! Thin safe wrapper over `matrixmultiply` for the dense products in the update rule.

use crate::real::Real;

/// Borrowed row-major matrix, optionally viewed transposed.
#[derive(Clone, Copy)]
pub struct Mat<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a, T: Real> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols, "matrix buffer too small");
        Mat {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

/// `out = a * b + beta * out`, `out` row-major `a.rows x b.cols`.
pub fn gemm<T: Real>(a: Mat<'_, T>, b: Mat<'_, T>, beta: T, out: &mut [T]) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(out.len() >= m * n, "output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in &mut out[..m * n] {
            *x = if beta == T::zero() { T::zero() } else { *x * beta };
        }
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches, and `out` is a unique
    // borrow so it cannot alias the shared inputs.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Adds `bias[r]` to every entry of row `r`.
pub fn add_row_bias<T: Real>(out: &mut [T], bias: &[T], cols: usize) {
    for (row, &b) in out.chunks_exact_mut(cols).zip(bias) {
        for x in row {
            *x += b;
        }
    }
}

/// `acc[r] += sum_c m[r, c]`.
pub fn accumulate_row_sums<T: Real>(acc: &mut [T], m: &[T], cols: usize) {
    for (a, row) in acc.iter_mut().zip(m.chunks_exact(cols)) {
        *a += row.iter().copied().sum::<T>();
    }
}
