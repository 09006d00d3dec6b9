//! Minimal differentiable-computation engine.
//!
//! Layers carry hand-written backward passes; [`gradcheck`] verifies them against central
//! finite differences. Everything is generic over the scalar (`f32` for training, `f64`
//! for tight gradient checks), with reductions accumulated in `T::Acc`.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::real::Real;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, restore, save_checkpoint, Checkpoint};
pub use gradcheck::{grad_check, Differentiable, GradCheckOptions, GradCheckReport};
pub use layers::{Activation, Conv2dCircular, Dense, GraphConv};

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    pub data: Vec<T>,
}

pub type TensorF = Tensor<f32>;

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {shape:?} needs {n} values, got {}", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(&other.shape)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    /// Gaussian init with standard deviation `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Self::from_fn(shape, |_| T::lit(normal.sample(rng)))
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.gen_range(-bound..=bound)))
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect() }
    }

    pub fn expect_shape(&self, shape: &[usize], what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::Shape(format!("{what}: expected {shape:?}, got {:?}", self.shape)));
        }
        Ok(())
    }
}

/// Anything owning a fixed, ordered list of named parameter tensors.
pub trait Parameterized<T: Real> {
    fn param_names(&self) -> Vec<String>;
    fn params(&self) -> Vec<&Tensor<T>>;
    fn params_mut(&mut self) -> Vec<&mut Tensor<T>>;

    fn zero_grads(&self) -> Vec<Tensor<T>> {
        self.params().into_iter().map(Tensor::zeros_like).collect()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Sums per-shard gradient lists in order, so the result does not depend on scheduling.
pub fn sum_grads<T: Real>(shards: Vec<Vec<Tensor<T>>>) -> Option<Vec<Tensor<T>>> {
    let mut it = shards.into_iter();
    let mut acc = it.next()?;
    for g in it {
        for (a, b) in acc.iter_mut().zip(&g) {
            a.add_assign(b);
        }
    }
    Some(acc)
}
