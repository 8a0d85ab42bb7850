use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type of the tensor engine: `f64` for checking, `f32` for runs.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const BYTES: usize;
    const DTYPE: &'static str;

    /// `C = alpha * A B + beta * C` on raw strided operands.
    ///
    /// # Safety
    /// All three operands must be valid for the given extents and strides,
    /// `c` must not alias `a` or `b`, and `c` may be uninitialized only when
    /// `beta` is zero.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_ptr(
        m: usize, k: usize, n: usize, alpha: Self,
        a: *const Self, rsa: usize, csa: usize,
        b: *const Self, rsb: usize, csb: usize,
        beta: Self, c: *mut Self, rsc: usize, csc: usize,
    );

    fn put_le(self, out: &mut Vec<u8>);
    fn get_le(bytes: &[u8]) -> Self;

    /// `exp` written so that loops over it vectorize.
    fn exp_fast(self) -> Self;

    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }

    #[inline]
    fn f(self) -> f64 {
        self.to_f64().unwrap()
    }

    /// Bounds-checked `C = alpha * A B + beta * C`.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize, k: usize, n: usize, alpha: Self,
        a: &[Self], rsa: usize, csa: usize,
        b: &[Self], rsb: usize, csb: usize,
        beta: Self, c: &mut [Self], rsc: usize, csc: usize,
    ) {
        check_extent(a.len(), m, k, rsa, csa, "a");
        check_extent(b.len(), k, n, rsb, csb, "b");
        check_extent(c.len(), m, n, rsc, csc, "c");
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: extents checked above; `c` is an exclusive borrow.
        unsafe { Self::gemm_ptr(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc) }
    }
}

#[inline]
fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize, what: &str) {
    if rows > 0 && cols > 0 {
        let last = (rows - 1) * rs + (cols - 1) * cs;
        assert!(last < len, "gemm operand {what} out of bounds: {last} >= {len}");
    }
}

/// `alpha * A B` into a fresh row-major `m x n` buffer.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_new<T: Real>(
    m: usize, k: usize, n: usize, alpha: T,
    a: &[T], rsa: usize, csa: usize,
    b: &[T], rsb: usize, csb: usize,
) -> Vec<T> {
    check_extent(a.len(), m, k, rsa, csa, "a");
    check_extent(b.len(), k, n, rsb, csb, "b");
    if k == 0 || m == 0 || n == 0 {
        return vec![T::zero(); m * n];
    }
    let mut out: Vec<T> = Vec::with_capacity(m * n);
    // SAFETY: operands checked above; with beta = 0 the kernel writes all
    // m*n entries of `out` without reading them.
    unsafe {
        T::gemm_ptr(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, T::zero(), out.as_mut_ptr(), n, 1);
        out.set_len(m * n);
    }
    out
}

/// Cephes-style `expf`: reduction by `ln 2` and a degree-6 polynomial.
/// Rounding uses the 1.5 * 2^23 trick so it stays branch-free.
#[inline(always)]
fn exp_f32(x: f32) -> f32 {
    let x = x.clamp(-87.0, 88.0);
    let t = x * std::f32::consts::LOG2_E;
    let k = (t + 12_582_912.0) - 12_582_912.0;
    let r = x - k * 0.693_359_4 + k * 2.121_944_4e-4;
    let p = 1.987_569_2e-4f32;
    let p = p * r + 1.398_2e-3;
    let p = p * r + 8.333_452e-3;
    let p = p * r + 4.166_579_6e-2;
    let p = p * r + 0.166_666_65;
    let p = p * r + 0.5;
    let e = p * r * r + r + 1.0;
    let scale = f32::from_bits((((k as i32) + 127) as u32) << 23);
    e * scale
}

macro_rules! impl_real {
    ($t:ty, $gemm:path, $name:literal, $exp:expr) => {
        impl Real for $t {
            const BYTES: usize = std::mem::size_of::<$t>();
            const DTYPE: &'static str = $name;

            unsafe fn gemm_ptr(
                m: usize, k: usize, n: usize, alpha: Self,
                a: *const Self, rsa: usize, csa: usize,
                b: *const Self, rsb: usize, csb: usize,
                beta: Self, c: *mut Self, rsc: usize, csc: usize,
            ) {
                $gemm(
                    m, k, n, alpha,
                    a, rsa as isize, csa as isize,
                    b, rsb as isize, csb as isize,
                    beta, c, rsc as isize, csc as isize,
                );
            }

            fn put_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn get_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().unwrap())
            }

            #[inline(always)]
            fn exp_fast(self) -> Self {
                $exp(self)
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm, "f32", exp_f32);
impl_real!(f64, matrixmultiply::dgemm, "f64", f64::exp);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_f32_close_to_std() {
        let mut worst = 0.0f64;
        let mut x = -80.0f32;
        while x < 80.0 {
            let a = exp_f32(x) as f64;
            let b = (x as f64).exp();
            worst = worst.max(((a - b) / b).abs());
            x += 0.013;
        }
        assert!(worst < 4e-7, "relative error {worst}");
        assert_eq!(exp_f32(0.0), 1.0);
        assert!(exp_f32(-200.0) < 1e-37);
    }

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let c = gemm_new(2, 3, 4, 1.0, &a, 3, 1, &b, 4, 1);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|l| a[i * 3 + l] * b[l * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
    }
}
