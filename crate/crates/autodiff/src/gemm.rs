//! Thin safe wrapper over `matrixmultiply::sgemm`.
//!
//! Every output element is a dot product accumulated in a fixed order over the
//! inner dimension, independent of how many columns are computed at once. The
//! routed convolution relies on this to match plain convolution bit-for-bit.

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f32],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn row_major(data: &'a [f32], cols: usize) -> Self {
        View { data, rs: cols, cs: 1 }
    }

    /// Transpose of a row-major `rows x cols` buffer.
    pub fn transposed(data: &'a [f32], cols: usize) -> Self {
        View { data, rs: 1, cs: cols }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c[m x n] = a[m x k] * b[k x n] + beta * c`, with `c` row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: View<'_>, b: View<'_>, beta: f32, c: &mut [f32]) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm: output buffer too small");
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    assert!(a.max_index(m, k) < a.data.len(), "gemm: lhs view out of bounds");
    assert!(b.max_index(k, n) < b.data.len(), "gemm: rhs view out of bounds");
    // SAFETY: the asserts above bound every index sgemm touches in a, b and c.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
