//! Dense 4-D tensors (batch, channel, height, width) with row-major storage.
//!
//! `Tensor<T>` is the universal value type of the crate: feature maps, conv
//! weights (`[C_out, C_in, k, k]`), per-channel parameters (`[1, C, 1, 1]`)
//! and learned scalars (`[1, 1, 1, 1]`) all use it. Storage is `f32` in
//! normal operation; every numeric routine is generic so gradient checks can
//! run the identical code path in `f64`.

use crate::error::TensorError;
use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt;

/// Element type bound for all numeric code in the crate.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for writing literal constants in generic code.
#[inline]
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("literal converts to scalar type")
}

/// Extents of a 4-D tensor: (batch, channels, height, width).
#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct Shape {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { b, c, h, w }
    }

    /// Shape of a plain matrix, stored as `[1, 1, rows, cols]`.
    pub const fn mat(rows: usize, cols: usize) -> Self {
        Shape::new(1, 1, rows, cols)
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.b * self.c * self.h * self.w
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.c + c) * self.h + y) * self.w + x
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.b, self.c, self.h, self.w)
    }
}

/// Dense row-major 4-D array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self, TensorError> {
        if data.len() != shape.numel() {
            return Err(TensorError::Shape {
                op: "from_vec",
                detail: format!("data length {} != numel of {}", data.len(), shape),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![value],
        }
    }

    /// Matrix constructor: data is `rows * cols` row-major.
    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, TensorError> {
        Tensor::from_vec(Shape::mat(rows, cols), data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.index(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.shape.index(b, c, y, x);
        self.data[i] = v;
    }

    /// Value of a `[1,1,1,1]` tensor.
    pub fn item(&self) -> Result<T, TensorError> {
        if self.numel() != 1 {
            return Err(TensorError::Shape {
                op: "item",
                detail: format!("expected scalar, got {}", self.shape),
            });
        }
        Ok(self.data[0])
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: Shape) -> Result<Self, TensorError> {
        if shape.numel() != self.numel() {
            return Err(TensorError::Shape {
                op: "reshape",
                detail: format!("{} -> {} changes element count", self.shape, shape),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Cast elementwise to another scalar type (f32 <-> f64).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap())
                .collect(),
        }
    }

    /// Max absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<T, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::Shape {
                op: "max_abs_diff",
                detail: format!("{} vs {}", self.shape, other.shape),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{} ", self.shape)?;
        if self.numel() <= 16 {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "[{} elements]", self.numel())
        }
    }
}
