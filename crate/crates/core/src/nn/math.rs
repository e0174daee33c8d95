//! Dense row-major matrix kernels used by the transformer.
//!
//! Everything is generic over [`Scalar`] so the whole model can run in f32
//! for training and in f64 as a reference mode for gradient checks. The
//! kernels are written in the add-into `ikj` form that LLVM autovectorizes.

use std::fmt::Debug;
use std::iter::Sum;

/// Element type for model arithmetic (f32 runtime, f64 reference mode).
pub trait Scalar:
    Copy
    + Default
    + PartialOrd
    + Debug
    + Send
    + Sync
    + Sum
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn ln_1p(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn maxs(self, other: Self) -> Self;
    fn mins(self, other: Self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline(always)]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline(always)]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline(always)]
            fn ln_1p(self) -> Self {
                self.ln_1p()
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline(always)]
            fn tanh(self) -> Self {
                self.tanh()
            }
            #[inline(always)]
            fn maxs(self, other: Self) -> Self {
                self.max(other)
            }
            #[inline(always)]
            fn mins(self, other: Self) -> Self {
                self.min(other)
            }
            #[inline(always)]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline(always)]
            fn is_finite(self) -> bool {
                self.is_finite()
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Shorthand for `Scalar::from_f64`, used all over the model code.
#[inline(always)]
pub fn sc<E: Scalar>(x: f64) -> E {
    E::from_f64(x)
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<E> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<E>,
}

impl<E: Scalar> Mat<E> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![E::ZERO; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<E>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix shape/data mismatch");
        Mat { rows, cols, data }
    }

    #[inline(always)]
    pub fn row(&self, i: usize) -> &[E] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline(always)]
    pub fn row_mut(&mut self, i: usize) -> &mut [E] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn fill(&mut self, v: E) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `c += a * b` with `a: [m x k]`, `b: [k x n]`, `c: [m x n]`.
pub fn matmul_acc<E: Scalar>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c = a * b` (overwrite).
pub fn matmul<E: Scalar>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    c.iter_mut().for_each(|x| *x = E::ZERO);
    matmul_acc(a, b, c, m, k, n);
}

/// `c += a^T * b` with `a: [m x k]`, `b: [m x n]`, `c: [k x n]`.
///
/// This is the weight-gradient kernel (`dW = X^T dY`).
pub fn matmul_at_b_acc<E: Scalar>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for p in 0..m {
        let a_row = &a[p * k..(p + 1) * k];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c += a * b^T` with `a: [m x k]`, `b: [n x k]`, `c: [m x n]`.
///
/// Used for attention scores (`Q K^T`) and input gradients (`dX = dY W^T`).
pub fn matmul_a_bt_acc<E: Scalar>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *cv += dot(a_row, b_row);
        }
    }
}

/// Dot product with a handful of accumulators so LLVM emits wide FMAs.
#[inline]
pub fn dot<E: Scalar>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 8;
    let mut acc = [E::ZERO; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let off = c * LANES;
        for l in 0..LANES {
            acc[l] += a[off + l] * b[off + l];
        }
    }
    let mut tail = E::ZERO;
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    acc.iter().copied().sum::<E>() + tail
}

/// Adds `bias` (length n) to every row of `x: [m x n]`.
pub fn add_bias<E: Scalar>(x: &mut [E], bias: &[E], m: usize, n: usize) {
    debug_assert_eq!(x.len(), m * n);
    debug_assert_eq!(bias.len(), n);
    for i in 0..m {
        let row = &mut x[i * n..(i + 1) * n];
        for (xv, &bv) in row.iter_mut().zip(bias) {
            *xv += bv;
        }
    }
}

/// `y += x` elementwise.
pub fn add_assign<E: Scalar>(y: &mut [E], x: &[E]) {
    debug_assert_eq!(y.len(), x.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += xv;
    }
}

/// `y += s * x` elementwise.
pub fn axpy<E: Scalar>(y: &mut [E], s: E, x: &[E]) {
    debug_assert_eq!(y.len(), x.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += s * xv;
    }
}
