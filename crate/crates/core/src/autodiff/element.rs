use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type a [`Graph`](super::Graph) computes in.
///
/// Training runs in `f32`; gradient verification also runs every network
/// in `f64`, so all layers are generic over this trait.
pub trait Element:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const NAME: &'static str;

    /// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
    /// `op(a)` is `m x k` and `op(b)` is `k x n`.
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
        beta: Self,
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Element")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("Element converts to f64")
    }
}

fn strides(cols: usize, trans: bool) -> (isize, isize) {
    // Stored matrix is rows x cols row-major; a transposed view swaps strides.
    if trans {
        (1, cols as isize)
    } else {
        (cols as isize, 1)
    }
}

/// Rows of `a` at or below this count skip the packing kernel.
const SMALL_M: usize = 4;

fn dot<F: Float + AddAssign>(x: &[F], y: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let (xc, yc) = (x.chunks_exact(8), y.chunks_exact(8));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] += a[l] * b[l];
        }
    }
    let mut tail = F::zero();
    for (&a, &b) in xr.iter().zip(yr) {
        tail += a * b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Direct kernels for the shapes recurrent steps produce: a few rows
/// (matrix-vector products) and rank-one updates (`k == 1`). Returns false
/// when the packing kernel should handle the product.
#[allow(clippy::too_many_arguments)]
fn gemm_small<F: Float + AddAssign>(m: usize, k: usize, n: usize, a: &[F], trans_a: bool, b: &[F], trans_b: bool, c: &mut [F], beta: F) -> bool {
    let scale = |c: &mut [F]| {
        if beta == F::zero() {
            c.iter_mut().for_each(|v| *v = F::zero());
        } else if beta != F::one() {
            c.iter_mut().for_each(|v| *v = *v * beta);
        }
    };
    if k == 1 {
        let c = &mut c[..m * n];
        scale(c);
        for i in 0..m {
            let ai = a[i];
            for (cv, &bv) in c[i * n..(i + 1) * n].iter_mut().zip(&b[..n]) {
                *cv += ai * bv;
            }
        }
        return true;
    }
    if m > SMALL_M || trans_a {
        return false;
    }
    let c = &mut c[..m * n];
    scale(c);
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        let out = &mut c[i * n..(i + 1) * n];
        if trans_b {
            for (j, cv) in out.iter_mut().enumerate() {
                *cv += dot(row, &b[j * k..(j + 1) * k]);
            }
        } else {
            for (p, &ap) in row.iter().enumerate() {
                for (cv, &bv) in out.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *cv += ap * bv;
                }
            }
        }
    }
    true
}

macro_rules! impl_element {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Element for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                c: &mut [Self],
                beta: Self,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if gemm_small(m, k, n, a, trans_a, b, trans_b, c, beta) {
                    return;
                }
                let (rsa, csa) = if trans_a { strides(m, true) } else { strides(k, false) };
                let (rsb, csb) = if trans_b { strides(k, true) } else { strides(n, false) };
                // SAFETY: bounds checked above; strides describe views inside the slices.
                unsafe {
                    $kernel(
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

impl_element!(f32, "f32", matrixmultiply::sgemm);
impl_element!(f64, "f64", matrixmultiply::dgemm);
