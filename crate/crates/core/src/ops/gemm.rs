//! Row-major dense matrix products on `f64` slices.
//!
//! Thin safe wrappers over `matrixmultiply::dgemm`. The kernel uses a fixed
//! blocked summation order and no internal threading, so results are
//! bit-identical from run to run.

/// `c = a(m×k) · b(k×n)`, all row-major, `c` overwritten.
pub fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, 1.0, a, false, b, false, 0.0, c);
}

/// `c += a(m×k) · b(k×n)`.
pub fn matmul_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, 1.0, a, false, b, false, 1.0, c);
}

/// `c = aᵀ(m×k) · b(k×n)` where `a` is stored as k×m row-major.
pub fn matmul_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, 1.0, a, true, b, false, 0.0, c);
}

/// `c += aᵀ(m×k) · b(k×n)` where `a` is stored as k×m row-major.
pub fn matmul_tn_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, 1.0, a, true, b, false, 1.0, c);
}

/// `c = a(m×k) · bᵀ(k×n)` where `b` is stored as n×k row-major.
pub fn matmul_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, 1.0, a, false, b, true, 0.0, c);
}

/// `c += a(m×k) · bᵀ(k×n)` where `b` is stored as n×k row-major.
pub fn matmul_nt_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, 1.0, a, false, b, true, 1.0, c);
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "lhs length");
    assert_eq!(b.len(), k * n, "rhs length");
    assert_eq!(c.len(), m * n, "out length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a {
        (1isize, m as isize)
    } else {
        (k as isize, 1isize)
    };
    let (rsb, csb) = if trans_b {
        (1isize, k as isize)
    } else {
        (n as isize, 1isize)
    };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

    #[test]
    fn small_product() {
        // [1 2; 3 4] · [5 6; 7 8] = [19 22; 43 50]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        matmul(2, 2, 2, &a, &b, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.5, -1.0, 2.0, 0.0, 3.0]; // 3x2
        let mut c_ref = [0.0; 4];
        matmul(2, 3, 2, &a, &b, &mut c_ref);

        // aᵀ stored as 3x2: transpose of a.
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c_tn = [0.0; 4];
        matmul_tn(2, 3, 2, &at, &b, &mut c_tn);
        assert_eq!(c_ref, c_tn);

        let bt = [1.0, -1.0, 0.0, 0.5, 2.0, 3.0]; // 2x3, transpose of b
        let mut c_nt = [0.0; 4];
        matmul_nt(2, 3, 2, &a, &bt, &mut c_nt);
        assert_eq!(c_ref, c_nt);
    }
}
