//! Safe row-major wrapper over `matrixmultiply::dgemm`.

#[derive(Debug, Clone, Copy)]
pub(crate) enum Trans {
    No,
    Yes,
}

/// `c = a' * b' + beta * c` where `a'` is `m x k`, `b'` is `k x n`, and a
/// primed operand is the stored row-major matrix, transposed if requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: Trans, b: &[f64], tb: Trans, beta: f64, c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match ta {
        Trans::No => (k as isize, 1),
        Trans::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (n as isize, 1),
        Trans::Yes => (1, k as isize),
    };
    // SAFETY: the asserted lengths cover every index the strides reach.
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
