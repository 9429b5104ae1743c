//! Dense NCHW tensors with an optional reverse-mode tape.
//!
//! Every [`Tensor`] is a rank-4 array stored row-major in `(n, c, h, w)`
//! order. Tensors are immutable; operators allocate new outputs. A tensor
//! that was registered on a [`Tape`] (directly through [`Tape::track`] or by
//! being the output of an operator with a tracked input) records the
//! operator and its saved activations so that [`Tensor::backward`] can
//! replay them in reverse.
//!
//! The engine is generic over [`Real`]. Inference and training run in `f32`;
//! `f64` exists so finite-difference checks have enough headroom to be
//! meaningful.

mod conv;
pub mod gradcheck;
pub mod memory;
mod ops;
mod tape;

use std::fmt;
use std::sync::Arc;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{ensure_arg, Result};

pub use conv::{conv_output_size, conv_transpose_output_size, set_num_threads, ConvSpec};
pub use memory::Storage;
pub use tape::{Gradients, Tape};

pub use conv::fault_injection;

/// Scalar element type of the engine.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + fmt::LowerExp
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    /// `C = alpha * A * B + beta * C` for strided row/column layouts.
    ///
    /// # Safety
    /// The pointers and strides must describe valid, non-overlapping
    /// matrices of the given sizes; `C` must not alias `A` or `B`.
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
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite conversion")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";

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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Extent of a rank-4 NCHW tensor.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape([n, c, h, w])
    }

    pub const fn scalar() -> Self {
        Shape([1, 1, 1, 1])
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.0[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.0[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.0[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.0[3]
    }
    #[inline]
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
    /// Number of elements in one `(h, w)` plane.
    #[inline]
    pub fn plane(&self) -> usize {
        self.h() * self.w()
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape([self.n(), c, self.h(), self.w()])
    }

    pub fn with_hw(self, h: usize, w: usize) -> Self {
        Shape([self.n(), self.c(), h, w])
    }

    /// Same batch and spatial extent, ignoring channels.
    pub fn same_nhw(&self, other: &Shape) -> bool {
        self.n() == other.n() && self.h() == other.h() && self.w() == other.w()
    }
}

impl From<[usize; 4]> for Shape {
    fn from(v: [usize; 4]) -> Self {
        Shape(v)
    }
}

impl From<(usize, usize, usize, usize)> for Shape {
    fn from((n, c, h, w): (usize, usize, usize, usize)) -> Self {
        Shape([n, c, h, w])
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "{n}x{c}x{h}x{w}")
    }
}

/// Dense rank-4 array, optionally recorded on a [`Tape`].
#[derive(Clone)]
pub struct Tensor<T: Real> {
    shape: Shape,
    data: Arc<Storage<T>>,
    node: Option<tape::NodeRef<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        ensure_arg!(
            data.len() == shape.numel(),
            "data length {} does not match shape {shape} ({} elements)",
            data.len(),
            shape.numel()
        );
        Ok(Self::from_parts(shape, data))
    }

    /// Callers guarantee `data.len() == shape.numel()`.
    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), shape.numel());
        Tensor {
            shape,
            data: Arc::new(Storage::new(data)),
            node: None,
        }
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        let shape = shape.into();
        Self::from_parts(shape, vec![T::zero(); shape.numel()])
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Self {
        let shape = shape.into();
        Self::from_parts(shape, vec![value; shape.numel()])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(Shape::scalar(), vec![value])
    }

    /// Builds a tensor by evaluating `f(n, c, y, x)` at every index.
    pub fn from_fn(
        shape: impl Into<Shape>,
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Self {
        let shape = shape.into();
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n() {
            for c in 0..shape.c() {
                for y in 0..shape.h() {
                    for x in 0..shape.w() {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Self::from_parts(shape, data)
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.shape.numel()
    }

    /// Element at `(n, c, y, x)`.
    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        let s = self.shape;
        self.data[((n * s.c() + c) * s.h() + y) * s.w() + x]
    }

    /// The value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        ensure_arg!(
            self.numel() == 1,
            "item() needs a scalar, got shape {}",
            self.shape
        );
        Ok(self.data[0])
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// A copy sharing the same storage but not attached to any tape.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape,
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Same data viewed under a different shape with identical element count.
    pub fn reshape(&self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        ensure_arg!(
            shape.numel() == self.numel(),
            "cannot reshape {} into {shape}",
            self.shape
        );
        let grad_shape = self.shape;
        Ok(Self::from_op(shape, self.to_vec(), &[self], move |g, _| {
            debug_assert_eq!(g.len(), grad_shape.numel());
            vec![Some(g.to_vec())]
        }))
    }

    /// Converts element type. The result is detached.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        let data = self
            .data
            .iter()
            .map(|v| U::from_f64_lossy(v.as_f64()))
            .collect();
        Tensor::from_parts(self.shape, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn storage(&self) -> Arc<Storage<T>> {
        Arc::clone(&self.data)
    }

    /// Registers the result of a differentiable operator.
    ///
    /// `backward` receives the gradient of the output and a mask telling
    /// which inputs need a gradient; it returns one optional gradient per
    /// input, each with the input's element count. When no input is
    /// tracked, the closure is dropped and the output is detached.
    ///
    /// # Panics
    /// If tracked inputs come from different tapes, or from a tape whose
    /// recording was already consumed by a backward pass.
    pub fn from_op<F>(shape: Shape, data: Vec<T>, inputs: &[&Tensor<T>], backward: F) -> Tensor<T>
    where
        F: FnOnce(&[T], &[bool]) -> Vec<Option<Vec<T>>> + Send + 'static,
    {
        debug_assert_eq!(data.len(), shape.numel());
        let mut out = Self::from_parts(shape, data);
        out.node = tape::record(inputs, shape.numel(), Box::new(backward));
        out
    }
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<T> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &T::NAME)
            .field("tracked", &self.is_tracked())
            .field("head", &preview)
            .finish()
    }
}
