//! Scalar element types for the two precision modes.
//!
//! Training runs in `f32`, gradient verification in `f64`. Everything in the
//! tensor engine and the network is generic over [`Element`] so both modes
//! share one code path; only the matrix-multiply kernel is dispatched per
//! type.

use std::fmt::{Debug, Display};

/// Scalar type usable inside tensors: `f32` (train mode) or `f64` (verify mode).
pub trait Element:
    num_traits::Float + num_traits::FromPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Precision label, used in diagnostics.
    const MODE: &'static str;

    /// `c += alpha * a @ b` for row-major matrices; `a` is `m x k` with row
    /// stride `rsa`/column stride `csa` (likewise `b`, `c`). `beta` scales the
    /// existing contents of `c` (0 overwrites, 1 accumulates).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );

    /// Lossy conversion from `f64`; constants like epsilons go through here.
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant converts to element type")
    }

    fn to_f64_c(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("element converts to f64")
    }
}

impl Element for f32 {
    const MODE: &'static str = "train32";

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        debug_assert!(c.len() >= m * n);
        unsafe {
            matrixmultiply::sgemm(
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
}

impl Element for f64 {
    const MODE: &'static str = "verify64";

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        debug_assert!(c.len() >= m * n);
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
}
