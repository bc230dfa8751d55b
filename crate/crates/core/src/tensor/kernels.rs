//! Thin safe wrappers over `matrixmultiply::dgemm` for contiguous
//! row-major operands. `beta` selects overwrite (0) or accumulate (1).

/// c[m×n] = a[m×k] · b[k×n] + beta·c
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    gemm_strided(m, k, n, a, (k as isize, 1), b, (n as isize, 1), c, (n as isize, 1), 1.0, beta);
}

/// c[m×n] = a[m×k] · b[n×k]ᵀ + beta·c
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    gemm_strided(m, k, n, a, (k as isize, 1), b, (1, k as isize), c, (n as isize, 1), 1.0, beta);
}

/// c[m×n] = a[k×m]ᵀ · b[k×n] + beta·c
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    gemm_strided(m, k, n, a, (1, m as isize), b, (n as isize, 1), c, (n as isize, 1), 1.0, beta);
}

/// General strided product. Strides are `(row, col)` in elements. The
/// slices must cover every element addressed by the given strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    (rsc, csc): (isize, isize),
    alpha: f64,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, rs: isize, cs: isize| -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
        }
    };
    assert!(extent(m, k, rsa, csa) <= a.len(), "gemm: lhs out of bounds");
    assert!(extent(k, n, rsb, csb) <= b.len(), "gemm: rhs out of bounds");
    assert!(extent(m, n, rsc, csc) <= c.len(), "gemm: output out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = (i as isize * rsc + j as isize * csc) as usize;
                c[idx] *= beta;
            }
        }
        return;
    }
    // SAFETY: the asserts above bound every element the kernel touches, and
    // `c` is exclusively borrowed so it cannot alias `a` or `b`.
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
            rsc,
            csc,
        );
    }
}
