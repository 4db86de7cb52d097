//! A small reverse-mode autograd engine specialised for convolutional U-Nets.
//!
//! Activations are laid out channel-major across the batch (`C × B × H × W`),
//! which turns every convolution into a single GEMM over `B·H·W` columns and
//! makes channel concatenation a plain `memcpy`. The engine is generic over
//! [`Float`] so the same network runs in `f32` for training and in `f64` for
//! finite-difference gradient checks.

mod graph;

pub use graph::{Graph, NodeId, ParamId};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Default
    + Debug
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    /// `c ← alpha·a·b + beta·c` with arbitrary element strides.
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m×k`, `k×n` and `m×n`
    /// matrices inside their allocations.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Float for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Float for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided view of a matrix inside a slice: `(offset, row stride, col stride)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub const fn row_major(cols: usize) -> Self {
        Self {
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }

    pub const fn col_major(rows: usize) -> Self {
        Self {
            offset: 0,
            rs: 1,
            cs: rows,
        }
    }

    fn last(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return self.offset;
        }
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// Bounds-checked GEMM: `c ← alpha·a·b + beta·c`, `a` is `m×k`, `b` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Float>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: &[F],
    la: Layout,
    b: &[F],
    lb: Layout,
    beta: F,
    c: &mut [F],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(la.last(m, k) < a.len().max(1) || k == 0, "gemm: a out of bounds");
    assert!(lb.last(k, n) < b.len().max(1) || k == 0, "gemm: b out of bounds");
    assert!(lc.last(m, n) < c.len(), "gemm: c out of bounds");
    // SAFETY: every index touched lies within the slices, checked above.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(la.offset),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr().add(lb.offset),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr().add(lc.offset),
            lc.rs as isize,
            lc.cs as isize,
        )
    }
}

/// Activation tensor in `C × B × H × W` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub c: usize,
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

impl<F: Float> Tensor<F> {
    pub fn zeros(c: usize, b: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            b,
            h,
            w,
            data: vec![F::zero(); c * b * h * w],
        }
    }

    pub fn from_vec(c: usize, b: usize, h: usize, w: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), c * b * h * w, "tensor data length");
        Self { c, b, h, w, data }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        [self.c, self.b, self.h, self.w]
    }

    /// Columns per channel row (`B·H·W`).
    #[inline]
    pub fn cols(&self) -> usize {
        self.b * self.h * self.w
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element `(c, b, y, x)`.
    #[inline]
    pub fn at(&self, c: usize, b: usize, y: usize, x: usize) -> F {
        self.data[((c * self.b + b) * self.h + y) * self.w + x]
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor {
            c: self.c,
            b: self.b,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| G::of(v.f64())).collect(),
        }
    }
}
