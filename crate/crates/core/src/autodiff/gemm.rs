/// `C += A·B` for strided `A: [m, k]`, `B: [k, n]`, `C: [m, n]`.
///
/// Strides are in elements (row stride, column stride), so transposed
/// operands are passed by swapping them.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa, "gemm: A too short");
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb, "gemm: B too short");
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc, "gemm: C too short");
    // SAFETY: the asserts above bound every index the kernel touches.
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
            1.0,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
