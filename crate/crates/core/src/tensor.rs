//! Dense row-major tensors over `f32` or `f64`.
//!
//! Training and inference run at 32-bit; the same code instantiated at
//! 64-bit backs the finite-difference gradient checks, which need the
//! extra headroom.

use crate::error::{Error, Result};

/// Element type for tensors: `f32` for training/inference, `f64` for
/// gradient checking.
pub trait Scalar:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense n-dimensional array, row-major, up to 5 axes
/// (batch, channel, time, height, width).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E: Scalar> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Scalar> Tensor<E> {
    /// Build from explicit shape and row-major data.
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || shape.len() > 5 || shape.iter().any(|&e| e == 0) {
            return Err(Error::Config(format!(
                "tensor shape must have 1..=5 axes with extents >= 1, got {shape:?}"
            )));
        }
        if expected != data.len() {
            return Err(Error::InvalidTensor {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, E::one())
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[E] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    /// The single element of a scalar (numel == 1) tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Cast elementwise through `f64` to another scalar type.
    pub fn cast<F: Scalar>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| F::from_f64(v.to_f64())).collect(),
        }
    }

    /// Elementwise accumulate: `self += other`. Shapes must match.
    pub fn add_assign(&mut self, other: &Tensor<E>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
    }

    /// Elementwise scale in place.
    pub fn scale_assign(&mut self, factor: E) {
        for a in self.data.iter_mut() {
            *a = *a * factor;
        }
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Tensor<E>) -> E {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b).abs())
            .fold(E::zero(), E::max)
    }
}

/// Shape of a 5-axis feature map `[n, c, t, h, w]`, the layout every
/// network operation works in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims5 {
    pub n: usize,
    pub c: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims5 {
    pub fn from_shape(op: &'static str, shape: &[usize]) -> Result<Self> {
        if shape.len() != 5 {
            return Err(Error::shape(
                op,
                format!("expected 5 axes [n,c,t,h,w], got {shape:?}"),
            ));
        }
        Ok(Dims5 {
            n: shape[0],
            c: shape[1],
            t: shape[2],
            h: shape[3],
            w: shape[4],
        })
    }

    pub fn to_shape(self) -> Vec<usize> {
        vec![self.n, self.c, self.t, self.h, self.w]
    }

    #[inline]
    pub fn numel(self) -> usize {
        self.n * self.c * self.t * self.h * self.w
    }

    /// Flat offset of the `[n, c, t]` plane; the plane itself is `h*w` long.
    #[inline]
    pub fn plane(self, n: usize, c: usize, t: usize) -> usize {
        ((n * self.c + c) * self.t + t) * self.h * self.w
    }
}
