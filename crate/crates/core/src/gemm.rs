//! Row-major matrix products on top of `matrixmultiply`.

/// Layout of an operand stored row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    /// Used as stored.
    N,
    /// Used transposed.
    T,
}

/// `C[m, n] = op(A)[m, k] * op(B)[k, n] (+ C if accumulate)`.
///
/// `a` holds `op(A)` as `[m, k]` when `Op::N` or `[k, m]` when `Op::T`,
/// and likewise for `b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    op_a: Op,
    b: &[f64],
    op_b: Op,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address only elements below m*k, k*n and
    // m*n, which the assertion guarantees are in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    let av = if ta { a[p * m + i] } else { a[i * k + p] };
                    let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                    c[i * n + j] += av * bv;
                }
            }
        }
        c
    }

    #[test]
    fn all_layouts_match_naive_product() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        for (oa, ta) in [(Op::N, false), (Op::T, true)] {
            for (ob, tb) in [(Op::N, false), (Op::T, true)] {
                let mut c = vec![1.0; m * n];
                gemm(m, k, n, &a, oa, &b, ob, &mut c, true);
                let expect = naive(m, k, n, &a, ta, &b, tb);
                for (x, y) in c.iter().zip(&expect) {
                    assert!((x - (y + 1.0)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn empty_inner_dimension_clears_or_keeps() {
        let mut c = vec![3.0; 4];
        gemm(2, 0, 2, &[], Op::N, &[], Op::N, &mut c, true);
        assert_eq!(c, vec![3.0; 4]);
        gemm(2, 0, 2, &[], Op::N, &[], Op::N, &mut c, false);
        assert_eq!(c, vec![0.0; 4]);
    }
}
