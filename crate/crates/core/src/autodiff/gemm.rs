//! Strided matrix products on row-major buffers.

/// Row-major operand view: `rows × cols` with an optional logical transpose.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, row_stride: cols, transposed: false }
    }

    pub fn strided(data: &'a [f64], rows: usize, cols: usize, row_stride: usize) -> Self {
        Self { data, rows, cols, row_stride, transposed: false }
    }

    pub fn t(self) -> Self {
        Self { transposed: !self.transposed, ..self }
    }

    fn logical(&self) -> (usize, usize, isize, isize) {
        if self.transposed {
            (self.cols, self.rows, 1, self.row_stride as isize)
        } else {
            (self.rows, self.cols, self.row_stride as isize, 1)
        }
    }

    fn extent(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.row_stride + self.cols
        }
    }
}

/// `c = alpha · a · b + beta · c` where `c` is row-major with row stride `ldc`.
pub(crate) fn gemm(alpha: f64, a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64], ldc: usize) {
    let (m, k, rsa, csa) = a.logical();
    let (kb, n, rsb, csb) = b.logical();
    assert_eq!(k, kb, "gemm inner dimensions differ");
    assert!(a.data.len() >= a.extent() && b.data.len() >= b.extent());
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= (m - 1) * ldc + n);
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * ldc..i * ldc + n] {
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: extents checked above; matrixmultiply only touches the
    // addressed elements.
    unsafe {
        matrixmultiply::dgemm(m, k, n, alpha, a.data.as_ptr(), rsa, csa, b.data.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), ldc as isize, 1);
    }
}

/// Convenience: dense `a · b` for contiguous operands.
pub(crate) fn matmul(a: MatRef<'_>, b: MatRef<'_>) -> Vec<f64> {
    let m = if a.transposed { a.cols } else { a.rows };
    let n = if b.transposed { b.rows } else { b.cols };
    let mut out = vec![0.0; m * n];
    gemm(1.0, a, b, 0.0, &mut out, n);
    out
}
