//! Thin safe layer over the strided GEMM kernel.

use crate::scalar::Scalar;

/// Strided matrix view descriptor: `(offset, row_stride, col_stride)`.
#[derive(Clone, Copy, Debug)]
pub struct Layout {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    /// Plain row-major `rows x cols` block starting at `offset`.
    pub fn row_major(offset: usize, cols: usize) -> Self {
        Layout {
            offset,
            rs: cols,
            cs: 1,
        }
    }

    /// Row-major storage read as its transpose.
    pub fn transposed(offset: usize, stored_cols: usize) -> Self {
        Layout {
            offset,
            rs: 1,
            cs: stored_cols,
        }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            self.offset
        } else {
            self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
        }
    }
}

/// `C[m x n] = alpha * A[m x k] * B[k x n] + beta * C`.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    beta: T,
    c: &mut [T],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let o = lc.offset + i * lc.rs + j * lc.cs;
                c[o] = if beta == T::zero() { T::zero() } else { beta * c[o] };
            }
        }
        return;
    }
    assert!(la.last(m, k) < a.len(), "gemm: A out of bounds");
    assert!(lb.last(k, n) < b.len(), "gemm: B out of bounds");
    assert!(lc.last(m, n) < c.len(), "gemm: C out of bounds");
    // SAFETY: bounds asserted above; `c` is a unique borrow so it cannot alias a or b.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(la.offset),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr().add(lb.offset),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr().add(lc.offset),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}

/// Contiguous row-major product with optional transposes.
///
/// `op(A)` is `m x k` and `op(B)` is `k x n`. With `accumulate` the result is
/// added into `c`, otherwise `c` is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let la = if a_t {
        Layout::transposed(0, m)
    } else {
        Layout::row_major(0, k)
    };
    let lb = if b_t {
        Layout::transposed(0, k)
    } else {
        Layout::row_major(0, n)
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    gemm_strided(m, k, n, T::one(), a, la, b, lb, beta, c, Layout::row_major(0, n));
}
