use std::sync::Arc;

use super::{kernels, Tensor};
use crate::error::Result;

/// The operation set the dynamics networks and integrators are written against.
///
/// [`Eager`] evaluates immediately; [`super::Tape`] evaluates and records so the
/// same code path can be differentiated.
pub trait Ops {
    type V: Clone;

    fn constant(&self, t: Tensor) -> Self::V;
    fn value(&self, v: &Self::V) -> Arc<Tensor>;

    fn add(&self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn sub(&self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn scale(&self, a: &Self::V, k: f64) -> Self::V;
    fn add_scalar(&self, a: &Self::V, k: f64) -> Self::V;
    /// `a + k * b`
    fn axpy(&self, a: &Self::V, k: f64, b: &Self::V) -> Result<Self::V>;
    /// Sum of all elements as a rank-0 value.
    fn sum(&self, a: &Self::V) -> Self::V;
    fn matmul(&self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn conv3x3(&self, x: &Self::V, w: &Self::V) -> Result<Self::V>;
    fn add_bias(&self, x: &Self::V, b: &Self::V, axis: usize) -> Result<Self::V>;
    fn softplus(&self, a: &Self::V) -> Self::V;
    fn sigmoid(&self, a: &Self::V) -> Self::V;
    fn concat(&self, parts: &[Self::V], axis: usize) -> Result<Self::V>;
    fn reshape(&self, a: &Self::V, shape: &[usize]) -> Result<Self::V>;

    fn dot(&self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        Ok(self.sum(&self.mul(a, b)?))
    }

    /// Same-padded 3x3 convolution followed by a per-channel bias.
    fn conv2d_3x3(&self, x: &Self::V, w: &Self::V, b: &Self::V) -> Result<Self::V> {
        let y = self.conv3x3(x, w)?;
        self.add_bias(&y, b, 0)
    }
}

/// Untaped evaluation.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Ops for Eager {
    type V = Arc<Tensor>;

    fn constant(&self, t: Tensor) -> Self::V {
        Arc::new(t)
    }

    fn value(&self, v: &Self::V) -> Arc<Tensor> {
        Arc::clone(v)
    }

    fn add(&self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        kernels::add(a, b).map(Arc::new)
    }

    fn sub(&self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        kernels::sub(a, b).map(Arc::new)
    }

    fn mul(&self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        kernels::mul(a, b).map(Arc::new)
    }

    fn scale(&self, a: &Self::V, k: f64) -> Self::V {
        Arc::new(kernels::scale(a, k))
    }

    fn add_scalar(&self, a: &Self::V, k: f64) -> Self::V {
        Arc::new(kernels::add_scalar(a, k))
    }

    fn axpy(&self, a: &Self::V, k: f64, b: &Self::V) -> Result<Self::V> {
        kernels::axpy(a, k, b).map(Arc::new)
    }

    fn sum(&self, a: &Self::V) -> Self::V {
        Arc::new(Tensor::scalar(a.sum()))
    }

    fn matmul(&self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        kernels::matmul(a, b).map(Arc::new)
    }

    fn conv3x3(&self, x: &Self::V, w: &Self::V) -> Result<Self::V> {
        kernels::conv3x3(x, w).map(Arc::new)
    }

    fn add_bias(&self, x: &Self::V, b: &Self::V, axis: usize) -> Result<Self::V> {
        kernels::add_bias(x, b, axis).map(Arc::new)
    }

    fn softplus(&self, a: &Self::V) -> Self::V {
        Arc::new(kernels::softplus(a))
    }

    fn sigmoid(&self, a: &Self::V) -> Self::V {
        Arc::new(kernels::sigmoid(a))
    }

    fn concat(&self, parts: &[Self::V], axis: usize) -> Result<Self::V> {
        let refs: Vec<&Tensor> = parts.iter().map(|p| p.as_ref()).collect();
        kernels::concat(&refs, axis).map(Arc::new)
    }

    fn reshape(&self, a: &Self::V, shape: &[usize]) -> Result<Self::V> {
        a.as_ref().clone().reshape(shape).map(Arc::new)
    }
}
