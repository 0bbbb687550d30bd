//! Single-precision GEMM on strided views. Reduction order depends only on
//! the operand shapes, so results are reproducible run to run.

/// A read-only matrix view: element (i, j) lives at `i * row_stride + j * col_stride`.
#[derive(Clone, Copy)]
pub struct View<'a> {
    data: &'a [f32],
    row_stride: usize,
    col_stride: usize,
}

impl<'a> View<'a> {
    /// Row-major storage with `cols` columns.
    pub fn row_major(data: &'a [f32], cols: usize) -> Self {
        Self {
            data,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// Transpose of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [f32], cols: usize) -> Self {
        Self {
            data,
            row_stride: 1,
            col_stride: cols,
        }
    }
}

/// `out (m×n) = a (m×k) · b (k×n)`, or `out += ...` when `accumulate`.
pub fn gemm(m: usize, k: usize, n: usize, a: View, b: View, out: &mut [f32], accumulate: bool) {
    assert!(out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out[..m * n].fill(0.0);
        }
        return;
    }
    let last_a = (m - 1) * a.row_stride + (k - 1) * a.col_stride;
    let last_b = (k - 1) * b.row_stride + (n - 1) * b.col_stride;
    assert!(last_a < a.data.len() && last_b < b.data.len());
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matches_triple_loop() {
        let a: Vec<f32> = (0..12).map(|x| x as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..20).map(|x| (x as f32).sin()).collect();
        let mut out = vec![0.0; 15];
        gemm(3, 4, 5, View::row_major(&a, 4), View::row_major(&b, 5), &mut out, false);
        for (x, y) in out.iter().zip(naive(3, 4, 5, &a, &b)) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn transposed_view() {
        // a is 2x3, use aᵀ (3x2) times a (2x3)
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = vec![0.0; 9];
        gemm(3, 2, 3, View::transposed(&a, 3), View::row_major(&a, 3), &mut out, false);
        assert_eq!(out, vec![17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);
    }
}
