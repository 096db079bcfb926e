//! Thin safe wrapper over `matrixmultiply::dgemm` with explicit strides.

/// Strided view of a matrix inside a slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn row_major(cols: usize) -> Self {
        View { rs: cols, cs: 1 }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        View { rs: 1, cs: cols }
    }

    fn span(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs + 1
        }
    }
}

/// `c = a · b + beta · c` where `a` is `m × k` and `b` is `k × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    cv: View,
) {
    assert!(a.len() >= av.span(m, k), "gemm: lhs slice too short");
    assert!(b.len() >= bv.span(k, n), "gemm: rhs slice too short");
    assert!(c.len() >= cv.span(m, n), "gemm: output slice too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * cv.rs + j * cv.cs] *= beta;
            }
        }
        return;
    }
    // SAFETY: the asserts above guarantee every addressed element lies in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr(),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr(),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}
