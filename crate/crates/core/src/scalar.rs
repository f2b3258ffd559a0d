//! Floating-point element type shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar the engine computes in: `f32` for training, `f64` for
/// high-precision reference checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// `c = alpha * a · b + beta * c` for strided row/column layouts.
    ///
    /// `a` is `m × k`, `b` is `k × n` and `c` is `m × n`; strides are in
    /// elements and may be used to express transposes without copying.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );

    /// Lossless for `f32`; narrowing for `f64`.
    fn to_f32_lossy(self) -> f32;

    fn from_f32(v: f32) -> Self;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }

    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("count representable as float")
    }
}

fn max_offset(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    (rows - 1) * rs as usize + (cols - 1) * cs as usize
}

fn check_bounds(len: usize, rows: usize, cols: usize, strides: (isize, isize), what: &str) {
    if rows > 0 && cols > 0 {
        assert!(
            max_offset(rows, cols, strides) < len,
            "gemm operand {what} out of bounds"
        );
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
                c_strides: (isize, isize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_bounds(a.len(), m, k, a_strides, "a");
                check_bounds(b.len(), k, n, b_strides, "b");
                check_bounds(c.len(), m, n, c_strides, "c");
                // SAFETY: every operand extent was bounds-checked above against its
                // slice length, and `c` is borrowed mutably so it cannot alias a or b.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0,
                        c_strides.1,
                    );
                }
            }

            fn to_f32_lossy(self) -> f32 {
                self as f32
            }

            fn from_f32(v: f32) -> Self {
                v as $t
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
