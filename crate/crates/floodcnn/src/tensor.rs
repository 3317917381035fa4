//! Dense n-dimensional float arrays and the arithmetic kernels the rest of
//! the crate builds on.
//!
//! Layout is always row-major (last axis fastest) and NHWC for image data.
//! There is no broadcasting beyond tensor-scalar ops; every shape mismatch is
//! a hard error.

use std::fmt;

use crate::error::{Error, Result};

/// Element type for tensors. Training and inference run on `f32`; `f64` is
/// used for gradient verification, where round-off would otherwise drown the
/// finite-difference signal.
pub trait Elem:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
}

impl Elem for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }
}

impl Elem for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }
}

/// Ordered list of positive extents, e.g. `[N, H, W, C]`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in shape {dims:?}")));
        }
        Ok(Shape(dims.to_vec()))
    }

    /// Rank-0 shape (a scalar tensor with one element).
    pub fn scalar() -> Self {
        Shape(Vec::new())
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides: element (i0..i{r-1}) sits at sum(i_a * stride_a).
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1usize; self.0.len()];
        for a in (0..self.0.len().saturating_sub(1)).rev() {
            strides[a] = strides[a + 1] * self.0[a + 1];
        }
        strides
    }

    /// Flat row-major offset of a multi-index.
    pub fn offset_of(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.rank() {
            return Err(Error::shape(format!(
                "index rank {} does not match shape rank {}",
                index.len(),
                self.rank()
            )));
        }
        let mut offset = 0;
        for (a, (&i, &d)) in index.iter().zip(self.0.iter()).enumerate() {
            if i >= d {
                return Err(Error::shape(format!("index {i} out of range for axis {a} (extent {d})")));
            }
            offset = offset * d + i;
        }
        Ok(offset)
    }

    /// Multi-index of a flat row-major offset (inverse of `offset_of`).
    pub fn index_of(&self, mut offset: usize) -> Vec<usize> {
        let mut index = vec![0usize; self.rank()];
        for a in (0..self.rank()).rev() {
            index[a] = offset % self.0[a];
            offset /= self.0[a];
        }
        index
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// Dense tensor: a shape plus a flat row-major buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor<T: Elem> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Elem> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} elements]", self.data.len())
        }
    }
}

impl<T: Elem> Tensor<T> {
    /// Tensor of the given shape with every element set to `fill`.
    pub fn new(shape: Shape, fill: T) -> Self {
        let n = shape.numel();
        Tensor { shape, data: vec![fill; n] }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::new(shape, T::ZERO)
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(format!(
                "buffer length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: T) -> Self {
        Tensor { shape: Shape::scalar(), data: vec![value] }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.shape.offset_of(index).expect("index in range")]
    }

    /// The single element of a rank-0 or one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    /// Same buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: Shape) -> Result<Tensor<T>> {
        if shape.numel() != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {} ({} elements) to {} ({} elements)",
                self.shape,
                self.numel(),
                shape,
                shape.numel()
            )));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip(&self, other: &Tensor<T>, op: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "{op}: shape {} does not match {}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip(other, "mul", |a, b| a * b)
    }

    /// Elementwise multiplication by a constant.
    pub fn scale(&self, c: T) -> Tensor<T> {
        self.map(|x| x * c)
    }

    /// `self += other * c`, in place. Used by parameter updates and gradient
    /// accumulation, the one sanctioned form of tensor mutation.
    pub fn add_scaled_assign(&mut self, other: &Tensor<T>, c: T) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "add_scaled_assign: shape {} does not match {}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b * c;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.fill(value);
    }

    /// Sum over the given axes; the named axes are removed from the shape.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Tensor<T>> {
        self.reduce_axes(axes, ReduceOp::Sum)
    }

    /// Mean over the given axes (sum divided by the reduced element count).
    pub fn mean_axes(&self, axes: &[usize]) -> Result<Tensor<T>> {
        self.reduce_axes(axes, ReduceOp::Mean)
    }

    /// Maximum over the given axes.
    pub fn max_axes(&self, axes: &[usize]) -> Result<Tensor<T>> {
        self.reduce_axes(axes, ReduceOp::Max)
    }

    fn reduce_axes(&self, axes: &[usize], op: ReduceOp) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut reduce = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(Error::shape(format!("reduce axis {a} out of range for rank {rank}")));
            }
            reduce[a] = true;
        }
        let kept: Vec<usize> = (0..rank).filter(|&a| !reduce[a]).collect();
        let out_dims: Vec<usize> = kept.iter().map(|&a| self.shape.dims()[a]).collect();
        let out_shape = if out_dims.is_empty() { Shape::scalar() } else { Shape::new(&out_dims)? };

        let reduced_count: usize = (0..rank).filter(|&a| reduce[a]).map(|a| self.shape.dims()[a]).product();
        let init = match op {
            ReduceOp::Max => None,
            _ => Some(T::ZERO),
        };
        let mut out: Vec<Option<T>> = vec![init; out_shape.numel()];

        let in_strides = self.shape.strides();
        let out_strides = out_shape.strides();
        for (flat, &v) in self.data.iter().enumerate() {
            let mut out_offset = 0;
            for (pos, &a) in kept.iter().enumerate() {
                let idx = (flat / in_strides[a]) % self.shape.dims()[a];
                out_offset += idx * out_strides[pos];
            }
            out[out_offset] = Some(match (op, out[out_offset]) {
                (ReduceOp::Max, None) => v,
                (ReduceOp::Max, Some(acc)) => {
                    if v > acc {
                        v
                    } else {
                        acc
                    }
                }
                (_, Some(acc)) => acc + v,
                (_, None) => v,
            });
        }

        let scale = match op {
            ReduceOp::Mean => T::from_f64(1.0 / reduced_count as f64),
            _ => T::ONE,
        };
        let data: Vec<T> = out
            .into_iter()
            .map(|v| v.expect("non-empty reduction") * scale)
            .collect();
        Tensor::from_vec(out_shape, data)
    }

    /// Cast every element through `f64` into another element type.
    pub fn cast<U: Elem>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// `a [m,k] x b [k,n] -> [m,n]`. The k-loop runs in the middle so the inner
/// loop streams both output and `b` rows contiguously.
pub fn matmul<T: Elem>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = dims2(a, "matmul lhs")?;
    let (k2, n) = dims2(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul: inner dims {k} and {k2} do not match ({} x {})",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(Shape::new(&[m, n])?);
    matmul_into(a.data(), b.data(), out.data_mut(), m, k, n);
    Ok(out)
}

pub(crate) fn matmul_into<T: Elem>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `a^T [m,k] x b [m,n] += out [k,n]` where `a` is stored `[m,k]`.
/// Accumulates, so callers can sum contributions across a batch.
pub(crate) fn matmul_tn_acc<T: Elem>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `a [m,k] x b^T [n,k] -> out [m,n]` where `b` is stored `[n,k]`.
/// Row-dot-row, so both operands stream contiguously.
pub(crate) fn matmul_nt_into<T: Elem>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            out[i * n + j] = acc;
        }
    }
}

fn dims2<T: Elem>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape(format!("{what} must be rank 2, got {}", t.shape())));
    }
    Ok((t.dims()[0], t.dims()[1]))
}

/// Identity matrix of extent `n`.
pub fn identity<T: Elem>(n: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(Shape::new(&[n, n]).expect("positive extent"));
    for i in 0..n {
        t.data_mut()[i * n + i] = T::ONE;
    }
    t
}
