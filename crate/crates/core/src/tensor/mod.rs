//! Dense rank-4 tensors and the reverse-mode tape that differentiates the
//! handful of operators the residual network and its losses need.
//!
//! Values live in [`Tensor`], a plain `(n, c, h, w)` row-major buffer. A
//! [`Graph`] records operations on tensors and replays them backwards to
//! populate gradients. Storage is generic over [`Real`] so the same code runs
//! in `f32` for training and `f64` for finite-difference checks.

pub mod gradcheck;
mod graph;
mod kernels;

pub use graph::{Axis, Graph, Var};
pub use kernels::Padding;

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use thiserror::Error;

/// Errors raised by tensor construction and graph operations.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: kernel size {k} must be odd")]
    EvenKernel { op: &'static str, k: usize },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: empty tensor")]
    Empty { op: &'static str },
    #[error("log_map: argument {value} + eps is not strictly positive")]
    NonPositiveLog { value: f64 },
    #[error("{op}: invalid argument ({detail})")]
    InvalidArgument { op: &'static str, detail: String },
    #[error("backward: loss must be a scalar, got shape {0}")]
    NonScalarLoss(Shape),
    #[error("backward: tape already consumed; record a new graph")]
    TapeConsumed,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Floating-point element type. Implemented for `f32` and `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    /// Converts an `f64` literal.
    fn lit(v: f64) -> Self;

    fn erf(self) -> Self;

    /// `exp`, allowed to trade the last ulp or two for vectorization.
    fn exp_fast(self) -> Self;

    /// `c = a·b + beta·c` for row/column-strided matrices, `a` is `m×k`, `b` is `k×n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
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
}

// The strides passed to `gemm` index only inside the slices; callers build
// them from the slice shapes, which `check_gemm_extent` verifies in debug.
fn check_gemm_extent(rows: usize, cols: usize, rs: isize, cs: isize, len: usize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    debug_assert!(last >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

impl Real for f32 {
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn erf(self) -> Self {
        erf_f32(self)
    }
    #[inline(always)]
    fn exp_fast(self) -> Self {
        exp_f32(self)
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
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
        check_gemm_extent(m, k, rsa, csa, a.len());
        check_gemm_extent(k, n, rsb, csb, b.len());
        check_gemm_extent(m, n, rsc, csc, c.len());
        // SAFETY: extents checked above; slices outlive the call.
        unsafe {
            matrixmultiply::sgemm(
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
                rsc,
                csc,
            );
        }
    }
}

impl Real for f64 {
    fn lit(v: f64) -> Self {
        v
    }
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn exp_fast(self) -> Self {
        self.exp()
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
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
        check_gemm_extent(m, k, rsa, csa, a.len());
        check_gemm_extent(k, n, rsb, csb, b.len());
        check_gemm_extent(m, n, rsc, csc, c.len());
        // SAFETY: extents checked above; slices outlive the call.
        unsafe {
            matrixmultiply::dgemm(
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
                rsc,
                csc,
            );
        }
    }
}

/// `(batch, channel, height, width)` extent of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.c, self.h, self.w)
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Self::new(d[0], d[1], d[2], d[3])
    }
}

/// Dense row-major `(n, c, h, w)` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.len() != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                detail: format!("shape {shape} needs {} values, got {}", shape.len(), data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Self {
        let shape = shape.into();
        Self { shape, data: vec![value; shape.len()] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: Shape::scalar(), data: vec![value] }
    }

    /// A `[len, 1, 1, 1]` vector, the layout used for biases and per-channel parameters.
    pub fn vector(values: Vec<T>) -> Self {
        Self { shape: Shape::new(values.len(), 1, 1, 1), data: values }
    }

    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let shape = shape.into();
        let mut data = Vec::with_capacity(shape.len());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f([n, c, y, x]));
                    }
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    /// Contiguous `h×w` plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    /// Contiguous `c×h×w` block of sample `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let s = self.shape.c * self.shape.plane();
        &self.data[n * s..(n + 1) * s]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(self, shape: impl Into<Shape>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "zip_map",
                detail: format!("{} vs {}", self.shape, other.shape),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape, data })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::lit(v.to_f64().unwrap_or(f64::NAN))).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>() / self.data.len() as f64
    }

    /// Population variance, accumulated in `f64`.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data
            .iter()
            .map(|v| {
                let d = v.to_f64().unwrap_or(f64::NAN) - m;
                d * d
            })
            .sum::<f64>()
            / self.data.len() as f64
    }

    /// Copies the `hh×ww` window with top-left `(y, x)` from sample `n`.
    pub fn window(&self, n: usize, y: usize, x: usize, hh: usize, ww: usize) -> Result<Self> {
        let s = self.shape;
        if n >= s.n || y + hh > s.h || x + ww > s.w {
            return Err(TensorError::InvalidArgument {
                op: "window",
                detail: format!("window {hh}x{ww} at ({y},{x}) outside {s}"),
            });
        }
        let mut data = Vec::with_capacity(s.c * hh * ww);
        for c in 0..s.c {
            let plane = self.plane(n, c);
            for row in y..y + hh {
                data.extend_from_slice(&plane[row * s.w + x..row * s.w + x + ww]);
            }
        }
        Ok(Self { shape: Shape::new(1, s.c, hh, ww), data })
    }

    /// Concatenates tensors with equal `(c, h, w)` along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or(TensorError::Empty { op: "stack" })?.shape;
        let mut data = Vec::with_capacity(first.len() * items.len());
        let mut n = 0;
        for t in items {
            let s = t.shape;
            if (s.c, s.h, s.w) != (first.c, first.h, first.w) {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    detail: format!("{s} vs {first}"),
                });
            }
            n += s.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Self { shape: Shape::new(n, first.c, first.h, first.w), data })
    }

    /// Splits along the batch axis.
    pub fn unstack(&self) -> Vec<Self> {
        let s = self.shape;
        (0..s.n)
            .map(|n| Self { shape: Shape::new(1, s.c, s.h, s.w), data: self.sample(n).to_vec() })
            .collect()
    }
}

/// Branch-free single-precision `erf`: an odd/even rational approximation on
/// `[-4, 4]` (outside that range `erf` rounds to ±1 in `f32`). Accurate to a
/// few ulps and, unlike a libm call, vectorizable inside elementwise loops.
#[inline(always)]
pub(crate) fn erf_f32(a: f32) -> f32 {
    // max/min rather than clamp: clamp's NaN handling blocks vectorization.
    let x = a.max(-4.0).min(4.0);
    let x2 = x * x;
    let mut p = x2 * -2.726_142_3e-10 + 2.770_681_4e-8;
    p = x2 * p + -2.101_024e-6;
    p = x2 * p + -5.692_506_4e-5;
    p = x2 * p + -7.349_906_3e-4;
    p = x2 * p + -2.954_600_1e-3;
    p = x2 * p + -1.609_603_3e-2;
    p *= x;
    let mut q = x2 * -1.456_607_2e-5 + -2.133_740_6e-4;
    q = x2 * q + -1.682_827e-3;
    q = x2 * q + -7.373_329_2e-3;
    q = x2 * q + -1.426_473_9e-2;
    p / q
}

/// Branch-free single-precision `exp` for arguments in `[-87, 88]` (clamped
/// outside): Cody–Waite reduction by `ln 2` and a degree-6 polynomial, with
/// round-to-nearest done by the `1.5·2²³` trick so no libm call remains.
#[inline(always)]
pub(crate) fn exp_f32(a: f32) -> f32 {
    const ROUND: f32 = 12_582_912.0;
    let x = a.max(-87.0).min(88.0);
    let r = (x * std::f32::consts::LOG2_E + ROUND) - ROUND;
    let x = x - r * 0.693_359_4 - r * -2.121_944_4e-4;
    let z = x * x;
    let mut y = 1.987_569_1e-4;
    y = y * x + 1.398_199_9e-3;
    y = y * x + 8.333_452e-3;
    y = y * x + 4.166_579_6e-2;
    y = y * x + 1.666_666_5e-1;
    y = y * x + 5.000_000_1e-1;
    y = y * z + x + 1.0;
    y * f32::from_bits(((r as i32 + 127) as u32) << 23)
}

pub(crate) fn ensure_finite<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

#[cfg(test)]
mod tests;
