//! Dense row-major tensors and a tape-based reverse-mode autodiff graph.
//!
//! Values are stored as f32 (training precision); every reduction (matmul,
//! softmax, layer-norm statistics, sums) accumulates in f64 before rounding,
//! which keeps forward passes deterministic and bit-identical across runs.
//! The op tape can additionally be replayed entirely in f64, which is what
//! the finite-difference gradient oracle uses.

mod graph;
pub mod nn;
mod ops;

pub use graph::{Graph, Val};

use crate::error::{Error, Result};
use rand::Rng;

/// Scalar element for tensor storage. Implemented for f32 and f64.
pub trait Elem:
    num_traits::Float + std::ops::AddAssign + std::fmt::Debug + Send + Sync + 'static
{
    fn to_f64(self) -> f64;
    fn from_f64(x: f64) -> Self;
    fn from_f32(x: f32) -> Self;
}

impl Elem for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn from_f32(x: f32) -> Self {
        x
    }
}

impl Elem for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(x: f64) -> Self {
        x
    }
    fn from_f32(x: f32) -> Self {
        x as f64
    }
}

/// Dense row-major tensor. A scalar has an empty shape and one element.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorBase<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

pub type Tensor = TensorBase<f32>;

impl<E: Elem> TensorBase<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor_new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![E::zero(); n],
        }
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: E) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().product::<usize>() == 1
    }

    pub fn item(&self) -> E {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<F: Elem>(&self) -> TensorBase<F> {
        TensorBase {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| F::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .fold(0.0f64, |m, &x| m.max(x.to_f64().abs()))
    }
}

impl Tensor {
    /// Normal(0, std) init; deterministic given the rng.
    pub fn randn<R: Rng>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| gauss(rng) * std).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Xavier-uniform init over the given fan-in/fan-out.
    pub fn xavier_uniform<R: Rng>(
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        let n: usize = shape.iter().product();
        let bound = (6.0f64 / (fan_in + fan_out) as f64).sqrt() as f32;
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }
}

/// Box-Muller gaussian from two uniforms; deterministic per rng stream.
pub fn gauss<R: Rng>(rng: &mut R) -> f32 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}
