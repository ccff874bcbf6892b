//! Thin wrappers around `matrixmultiply` for row-major buffers.

/// `c = beta * c + op(a) * op(b)` where `op(a)` is `m×k` and `op(b)` is `k×p`.
///
/// `ta`/`tb` select the transposed view of a stored row-major buffer, so
/// `a` is stored as `k×m` when `ta` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    p: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(c.len(), m * p);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (p as isize, 1) };
    // SAFETY: strides describe in-bounds views of slices whose lengths are checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            p,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            p as isize,
            1,
        );
    }
}
