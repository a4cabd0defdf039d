use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Scalar type a [`crate::Tensor`] can hold.
///
/// Training and inference run in `f32`; `f64` exists so the finite-difference
/// oracle can evaluate the same graphs without round-off swamping the step.
pub trait Element: Float + Default + Debug + Display + Sum + Send + Sync + 'static {
    /// `c = alpha * op(a) * op(b) + beta * c` with explicit row/column strides.
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

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// In-place `exp` over a slice. Inputs are assumed finite.
    fn exp_slice(xs: &mut [Self]) {
        for v in xs {
            *v = v.exp();
        }
    }
}

macro_rules! impl_element {
    ($t:ty, $gemm:path $(, $exp:path)?) => {
        impl Element for $t {
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
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: extents checked above, strides describe dense row-major
                // or transposed views of those buffers.
                unsafe {
                    $gemm(
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

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }
            $(
                fn exp_slice(xs: &mut [Self]) {
                    $exp(xs)
                }
            )?
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm, exp_f32_slice);
impl_element!(f64, matrixmultiply::dgemm);

/// Branch-free `exp` for `f32` (range reduction by `ln 2`, degree-6
/// polynomial, exponent assembled from bits). Relative error about 2e-7;
/// written so the loop auto-vectorizes. Arguments are clamped to the
/// representable range.
fn exp_f32_slice(xs: &mut [f32]) {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    const ROUND: f32 = 12_582_912.0; // 1.5 * 2^23
    for v in xs {
        let x = v.clamp(-87.0, 88.0);
        let shifted = x * LOG2E + ROUND;
        let n = shifted - ROUND;
        let bits = shifted.to_bits() as i32 - ROUND.to_bits() as i32;
        let r = x - n * LN2_HI - n * LN2_LO;
        let p = 1.987_569_2e-4;
        let p = p * r + 1.398_199_9e-3;
        let p = p * r + 8.333_452e-3;
        let p = p * r + 4.166_579_6e-2;
        let p = p * r + 1.666_666_5e-1;
        let p = p * r + 5.000_000_1e-1;
        let y = p * r * r + r + 1.0;
        *v = y * f32::from_bits(((bits + 127) << 23) as u32);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_matches_std() {
        let mut xs: Vec<f32> = (-8000..=8000).map(|i| i as f32 * 0.01).collect();
        let reference: Vec<f64> = xs.iter().map(|&x| (x as f64).exp()).collect();
        f32::exp_slice(&mut xs);
        for (a, b) in xs.iter().zip(&reference) {
            assert!(((*a as f64) - b).abs() <= 4e-7 * b, "{a} vs {b}");
        }
    }
}
