//! Dense row-major tensors and the scalar abstraction shared by the
//! 32-bit training path and the 64-bit verification path.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Floating point type usable by the engine.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a·b + beta * c` with explicit row/column strides.
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
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self;

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: callers pass buffers whose extents cover every strided
        // access implied by (m, k, n) and the strides; checked by debug asserts.
        debug_assert!(span(m, k, rsa, csa) <= a.len());
        debug_assert!(span(k, n, rsb, csb) <= b.len());
        debug_assert!(span(m, n, rsc, csc) <= c.len());
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
                rsc,
                csc,
            );
        }
    }

    fn from_f64_lossy(v: f64) -> f32 {
        v as f32
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        if m == 0 || n == 0 {
            return;
        }
        debug_assert!(span(m, k, rsa, csa) <= a.len());
        debug_assert!(span(k, n, rsb, csb) <= b.len());
        debug_assert!(span(m, n, rsc, csc) <= c.len());
        // SAFETY: see the f32 implementation.
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
                rsc,
                csc,
            );
        }
    }

    fn from_f64_lossy(v: f64) -> f64 {
        v
    }
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

/// Shorthand for converting literals into the engine scalar.
#[inline]
pub fn sc<F: Scalar>(v: f64) -> F {
    F::from_f64_lossy(v)
}

/// `c[m×n] (+)= a[m×k] · b[k×n]`, all row-major and contiguous.
pub fn matmul_into<F: Scalar>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    let beta = if accumulate { F::one() } else { F::zero() };
    F::gemm(
        m,
        k,
        n,
        F::one(),
        a,
        k as isize,
        1,
        b,
        n as isize,
        1,
        beta,
        c,
        n as isize,
        1,
    );
}

/// `c[m×n] (+)= a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt_into<F: Scalar>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    let beta = if accumulate { F::one() } else { F::zero() };
    F::gemm(
        m,
        k,
        n,
        F::one(),
        a,
        k as isize,
        1,
        b,
        1,
        k as isize,
        beta,
        c,
        n as isize,
        1,
    );
}

/// `c[k×n] (+)= a[m×k]ᵀ · b[m×n]`.
pub fn matmul_tn_into<F: Scalar>(
    a: &[F],
    b: &[F],
    c: &mut [F],
    m: usize,
    k: usize,
    n: usize,
    accumulate: bool,
) {
    let beta = if accumulate { F::one() } else { F::zero() };
    F::gemm(
        k,
        m,
        n,
        F::one(),
        a,
        1,
        k as isize,
        b,
        n as isize,
        1,
        beta,
        c,
        n as isize,
        1,
    );
}

/// Dense tensor: shape, row-major values and a lazily allocated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<F>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![F::zero(); n])
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: F) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [F] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![F::zero(); n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = F::zero());
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .map(|v| G::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        )
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<F>) -> F {
        self.data
            .iter()
            .zip(&other.data)
            .fold(F::zero(), |acc, (a, b)| acc.max((*a - *b).abs()))
    }
}
