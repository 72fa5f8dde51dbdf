//! Thin safe wrappers over `matrixmultiply::dgemm` for the three product
//! layouts the tape needs. All matrices are dense row-major.

/// `c = a · b` with `a: m×k`, `b: k×n`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, (k, 1), b, (n, 1), &mut c, 0.0);
    c
}

/// `acc += g · bᵀ` with `g: m×n`, `b: k×n`; `acc: m×k`.
pub(crate) fn acc_grad_lhs(acc: &mut [f64], g: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    gemm(m, n, k, g, (n, 1), b, (1, n), acc, 1.0);
}

/// `acc += aᵀ · g` with `a: m×k`, `g: m×n`; `acc: k×n`.
pub(crate) fn acc_grad_rhs(acc: &mut [f64], a: &[f64], g: &[f64], m: usize, k: usize, n: usize) {
    gemm(k, m, n, a, (1, k), g, (n, 1), acc, 1.0);
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the slices cover every index reachable through the given strides,
    // asserted above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
