//! Safe wrappers around `matrixmultiply::dgemm` for the handful of layouts the
//! tape needs.

/// Strided view description of an `rows × cols` matrix inside a slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self { rows, cols, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows × cols` matrix.
    pub fn transposed(rows: usize, cols: usize) -> Self {
        Self { rows: cols, cols: rows, rs: 1, cs: cols }
    }

    pub fn strided(rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        Self { rows, cols, rs, cs }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `c ← alpha·a·b + beta·c` over strided views. Panics if a view exceeds its slice.
pub(crate) fn gemm(
    alpha: f64,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
    lc: Layout,
) {
    assert_eq!(la.cols, lb.rows, "gemm inner dimension");
    assert_eq!(la.rows, lc.rows, "gemm output rows");
    assert_eq!(lb.cols, lc.cols, "gemm output cols");
    assert!(la.span() <= a.len() && lb.span() <= b.len() && lc.span() <= c.len());
    if lc.rows == 0 || lc.cols == 0 {
        return;
    }
    if la.cols == 0 {
        for i in 0..lc.rows {
            for j in 0..lc.cols {
                let v = &mut c[i * lc.rs + j * lc.cs];
                *v = if beta == 0.0 { 0.0 } else { beta * *v };
            }
        }
        return;
    }
    // SAFETY: every view was checked to lie within its slice above, and `c`
    // is uniquely borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            la.rows,
            la.cols,
            lb.cols,
            alpha,
            a.as_ptr(),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr(),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr(),
            lc.rs as isize,
            lc.cs as isize,
        );
    }
}

/// Row-major `c[m×n] (+)= a[m×k] · b[k×n]`.
pub(crate) fn matmul_into(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    gemm(
        1.0,
        a,
        Layout::row_major(m, k),
        b,
        Layout::row_major(k, n),
        if accumulate { 1.0 } else { 0.0 },
        c,
        Layout::row_major(m, n),
    );
}

/// `c[m×n] (+)= a[m×k] · bᵀ` where `b` is stored `n×k`.
pub(crate) fn matmul_nt_into(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    gemm(
        1.0,
        a,
        Layout::row_major(m, k),
        b,
        Layout::transposed(n, k),
        if accumulate { 1.0 } else { 0.0 },
        c,
        Layout::row_major(m, n),
    );
}

/// `c[m×n] (+)= aᵀ · b` where `a` is stored `k×m`.
pub(crate) fn matmul_tn_into(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    gemm(
        1.0,
        a,
        Layout::transposed(k, m),
        b,
        Layout::row_major(k, n),
        if accumulate { 1.0 } else { 0.0 },
        c,
        Layout::row_major(m, n),
    );
}
