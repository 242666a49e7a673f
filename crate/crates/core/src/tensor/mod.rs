//! Dense n-dimensional tensors with tape-based reverse-mode autodiff.
//!
//! [`NdTensor`] is a contiguous row-major buffer plus shape. All
//! differentiable computation goes through a [`Tape`]: ops record their
//! inputs, `backward` replays them in exact reverse order. Training runs in
//! `f32`; gradient-check tests instantiate the same code with `f64`.

mod attention;
pub mod gradcheck;
mod layers;
mod nn;
mod optim;
mod params;
mod tape;

pub use attention::{cross_attention, multi_head_attention, sinusoidal_embedding, AttentionWeights};
pub use layers::{Conv3dLayer, GroupNormLayer, LinearLayer, Mlp};
pub use nn::conv3d_out_extent;
pub use optim::{AdamWConfig, AdamWState};
pub use params::{ParamBinding, Params};
pub use tape::{Tape, Var};

use crate::{Error, Result};

/// Scalar element type of the engine: `f32` for training and inference,
/// `f64` for finite-difference gradient checks.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + num_traits::FromPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn of_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense tensor: positive extents, contiguous row-major data.
#[derive(Debug, Clone, PartialEq)]
pub struct NdTensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    /// Marks a leaf whose gradient should be accumulated by `backward`.
    pub requires_grad: bool,
    /// Filled by `backward` for leaves with `requires_grad`.
    pub grad: Option<Vec<T>>,
}

impl<T: Scalar> NdTensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::shape("NdTensor::new", format!("zero extent in {shape:?}")));
        }
        if numel != data.len() {
            return Err(Error::shape(
                "NdTensor::new",
                format!("shape {shape:?} implies {numel} elements, data has {}", data.len()),
            ));
        }
        Ok(NdTensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        NdTensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel: usize = shape.iter().product();
        NdTensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        NdTensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        NdTensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Standard-normal init scaled by `std`.
    pub fn randn(shape: &[usize], std: T, rng: &mut impl rand::Rng) -> Self
    where
        rand_distr::StandardNormal: rand_distr::Distribution<T>,
    {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: T = rng.sample(rand_distr::StandardNormal);
                z * std
            })
            .collect();
        NdTensor { shape: shape.to_vec(), data, requires_grad: false, grad: None }
    }

    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        NdTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Cast between scalar precisions through f64.
    pub fn cast<U: Scalar>(&self) -> NdTensor<U> {
        NdTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of_f64(v.as_f64())).collect(),
            requires_grad: false,
            grad: None,
        }
    }
}

/// Checks two shapes agree, reporting the first offending axis.
pub(crate) fn check_same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        return Ok(());
    }
    let axis = a
        .iter()
        .zip(b.iter())
        .position(|(x, y)| x != y)
        .map(|i| format!("axis {i}"))
        .unwrap_or_else(|| "rank".to_string());
    Err(Error::shape(op, format!("{a:?} vs {b:?} ({axis})")))
}
