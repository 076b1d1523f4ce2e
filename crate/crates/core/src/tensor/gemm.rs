use super::Scalar;

/// Bounds-checked wrapper over the strided matrix multiply.
///
/// Computes `c = alpha * op(a) * op(b) + beta * c` where `a` is m×k, `b` is
/// k×n and `c` is m×n, each addressed through (row stride, column stride).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    c: &mut [T],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= last(m, k, rsa, csa), "gemm: lhs out of bounds");
    assert!(b.len() >= last(k, n, rsb, csb), "gemm: rhs out of bounds");
    assert!(c.len() >= last(m, n, rsc, csc), "gemm: output out of bounds");
    // SAFETY: extents and strides were checked against the slice lengths.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        )
    }
}
