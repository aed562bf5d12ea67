use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type of a tensor.
pub trait Scalar: Float + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static {
    const DTYPE_TAG: u8;

    fn of_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `exp` used by activations: exact for `f64`, a branch-free polynomial
    /// (relative error below 1e-5 for |x| <= 80) for `f32` so activation loops vectorize.
    fn act_exp(self) -> Self;

    /// `c = a · b (+ c when accumulate)`, all row-major. `a` is `m×k`
    /// (stored `k×m` when `trans_a`), `b` is `k×n` (stored `n×k` when `trans_b`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        accumulate: bool,
    );
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // logical (rows x cols); transposed storage is (cols x rows)
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

fn exp_f32(x: f32) -> f32 {
    // 2^(x log2 e) = 2^n 2^f with f in [-0.5, 0.5]
    let y = (x * std::f32::consts::LOG2_E).clamp(-126.0, 126.0);
    // round to nearest through the 1.5 * 2^23 shifter; `round` is a libcall
    // without SSE4.1 and would block vectorization
    const SHIFTER: f32 = 12_582_912.0;
    let n = (y + SHIFTER) - SHIFTER;
    let f = y - n;
    let p = 1.0
        + f * (0.693_147_2
            + f * (0.240_226_5 + f * (0.055_504_11 + f * (0.009_618_13 + f * (0.001_333_55 + f * 0.000_154_04)))));
    let scale = f32::from_bits(((n as i32 + 127) as u32) << 23);
    p * scale
}

fn exp_f64(x: f64) -> f64 {
    x.exp()
}

macro_rules! impl_scalar {
    ($t:ty, $tag:expr, $gemm:path, $exp:path) => {
        impl Scalar for $t {
            const DTYPE_TAG: u8 = $tag;

            fn of_f64(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }

            fn act_exp(self) -> Self {
                $exp(self)
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(
                    a.len() >= m * k && b.len() >= k * n && c.len() >= m * n,
                    "gemm operand too small"
                );
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c[..m * n].fill(0.0);
                    }
                    return;
                }
                let (rsa, csa) = strides(m, k, trans_a);
                let (rsb, csb) = strides(k, n, trans_b);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: operand extents were checked above and the strides
                // describe dense row-major (or transposed) storage.
                unsafe {
                    $gemm(
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
        }
    };
}

impl_scalar!(f32, 0, matrixmultiply::sgemm, exp_f32);
impl_scalar!(f64, 1, matrixmultiply::dgemm, exp_f64);
