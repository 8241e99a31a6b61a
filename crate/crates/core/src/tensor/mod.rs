//! Minimal differentiable numeric kernel: dense tensors plus the handful of
//! ops the prediction network needs (convolution, bilinear sampling, resizing,
//! elementwise math), each paired with an analytic gradient.
//!
//! Conventions fixed repo-wide:
//! - image layout is channels-first `C x H x W`, row-major;
//! - frames carry values in `[0, 1]` at module boundaries (enforced by the
//!   synthesis clamp, never inside kernels);
//! - one multiply-accumulate counts as one FLOP.

mod conv;
mod elementwise;
mod resize;
mod sample;

pub use conv::{conv2d, conv2d_grad, conv_flops_executed, ConvGrads, ConvSpec};
pub use elementwise::{
    add, add_assign, concat_channels, mul, prelu, prelu_grad, scale, sigmoid, sigmoid_grad,
    split_channels, sub, tanh, tanh_grad,
};
pub use resize::{resize_bilinear, resize_bilinear_grad, ResizeFactor};
pub use sample::{bilinear_sample, bilinear_sample_grad};

use crate::error::{Error, Result};
use std::fmt;

/// Element type for all kernels. Single precision is the default for training
/// and inference; double precision exists for finite-difference testing.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + num_traits::NumCast
    + Copy
    + Send
    + Sync
    + fmt::Debug
    + 'static
{
    const NAME: &'static str;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}
impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

/// Lossless-enough conversion from an `f64` literal into any scalar type.
#[inline]
pub(crate) fn sc<T: Scalar>(x: f64) -> T {
    T::from(x).expect("scalar conversion")
}

/// Dense N-dimensional array. The universal carrier for frames, flows, masks
/// and feature maps.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor_new",
                detail: format!("shape {:?} implies {} elements, buffer has {}", shape, n, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    /// Builds a `C x H x W` tensor from a coordinate function.
    pub fn from_fn_chw(c: usize, h: usize, w: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ch, y, x));
                }
            }
        }
        Self { shape: vec![c, h, w], data }
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Interprets the tensor as `(C, H, W)`; errors on any other rank.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            other => Err(Error::Shape {
                op: "dims3",
                detail: format!("expected rank-3 CxHxW tensor, got shape {:?}", other),
            }),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[o, i, h, w] => Ok((o, i, h, w)),
            other => Err(Error::Shape {
                op: "dims4",
                detail: format!("expected rank-4 tensor, got shape {:?}", other),
            }),
        }
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> T {
        let (_, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    #[inline]
    pub fn set3(&mut self, c: usize, y: usize, x: usize, v: T) {
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x] = v;
    }

    /// One full `H x W` channel plane as a slice.
    pub fn plane(&self, c: usize) -> &[T] {
        let hw = self.shape[1] * self.shape[2];
        &self.data[c * hw..(c + 1) * hw]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                detail: format!("operand shapes differ: {:?} vs {:?}", self.shape, other.shape),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| if v < lo { lo } else if v > hi { hi } else { v })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from(v).expect("cast")).collect(),
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", T::NAME, self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}
