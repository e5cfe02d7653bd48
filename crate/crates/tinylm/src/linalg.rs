//! Thin wrappers over `matrixmultiply::dgemm` for row-major buffers.

/// `c[m×n] = beta·c + a[m×k] · b[k×n]`
pub(crate) fn mm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: buffer sizes checked above, strides describe dense row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c[k×n] += aᵀ · b` where `a` is `m×k` and `b` is `m×n`.
pub(crate) fn mm_tn_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= m * n && c.len() >= k * n);
    if k == 0 || n == 0 {
        return;
    }
    // SAFETY: as above; aᵀ is addressed through swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            k, m, n, 1.0,
            a.as_ptr(), 1, k as isize,
            b.as_ptr(), n as isize, 1,
            1.0,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c[m×k] = beta·c + a · bᵀ` where `a` is `m×n` and `b` is `k×n`.
pub(crate) fn mm_nt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert!(a.len() >= m * n && b.len() >= k * n && c.len() >= m * k);
    if m == 0 || k == 0 {
        return;
    }
    // SAFETY: as above; bᵀ is addressed through swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            m, n, k, 1.0,
            a.as_ptr(), n as isize, 1,
            b.as_ptr(), 1, n as isize,
            beta,
            c.as_mut_ptr(), k as isize, 1,
        );
    }
}

/// General strided `c = beta·c + a · b` with `a: m×k`, `b: k×n`, `c: m×n`,
/// each addressed as `ptr[row * rs + col * cs]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize, k: usize, n: usize,
    a: &[f64], (rsa, csa): (usize, usize),
    b: &[f64], (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64], (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(k == 0 || (a.len() > last(m, k, rsa, csa) && b.len() > last(k, n, rsb, csb)));
    assert!(c.len() > last(m, n, rsc, csc));
    // SAFETY: the asserts above bound every addressed element.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), rsa as isize, csa as isize,
            b.as_ptr(), rsb as isize, csb as isize,
            beta,
            c.as_mut_ptr(), rsc as isize, csc as isize,
        );
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four accumulators let the compiler vectorise without reassociating.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}
