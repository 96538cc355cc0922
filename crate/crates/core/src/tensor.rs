//! Dense tensors over f32 or f64.
//!
//! Training paths run in f32; gradient-check and oracle paths run in f64,
//! where central differences are trustworthy. The [`Scalar`] trait is the
//! small surface both share.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{CfilError, Result};
use crate::rng::SeededRng;
use crate::shape::Shape;

/// Element type for tensors: f32 (training) or f64 (checking).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Single precision guards weighted-op inputs against overflow of the
    /// quadratic distance kernel; double precision does not need it.
    const GUARD_WEIGHTED_INPUTS: bool;

    fn of_f64(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {
    const GUARD_WEIGHTED_INPUTS: bool = true;
}

impl Scalar for f64 {
    const GUARD_WEIGHTED_INPUTS: bool = false;
}

/// Dense row-major tensor with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Scalar> {
    shape: Shape,
    values: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, values: Vec<T>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(CfilError::Dimension {
                op: "tensor::new",
                lhs: shape.to_string(),
                rhs: format!("{} values", values.len()),
            });
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        let len = shape.len();
        Tensor {
            shape,
            values: vec![T::zero(); len],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        let len = shape.len();
        Tensor {
            shape,
            values: vec![value; len],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor::new(Shape::of(&[1]), vec![value]).expect("scalar shape")
    }

    /// Uniform values in [lo, hi) from the given stream.
    pub fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut SeededRng) -> Self {
        let len = shape.len();
        let values = (0..len)
            .map(|_| T::of_f64(rng.uniform_in(lo, hi)))
            .collect();
        Tensor {
            shape,
            values,
            grad: None,
            requires_grad: false,
        }
    }

    /// Fan-in-scaled uniform init: [-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn fan_in_uniform(shape: Shape, fan_in: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Tensor::uniform(shape, -bound, bound, rng)
    }

    /// Fan-in-scaled uniform with relu gain, [-sqrt(6/fan_in),
    /// sqrt(6/fan_in)): keeps activation variance roughly constant through
    /// conv/relu stages, which the weighted ops rely on (a near-constant
    /// feature map makes their softmax uniform and collapses the map to
    /// its mean).
    pub fn he_uniform(shape: Shape, fan_in: usize, rng: &mut SeededRng) -> Self {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        Tensor::uniform(shape, -bound, bound, rng)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [T]> {
        self.grad.as_deref_mut()
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    pub fn set_grad(&mut self, grad: Option<Vec<T>>) {
        if let Some(g) = &grad {
            debug_assert_eq!(g.len(), self.values.len());
        }
        self.grad = grad;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Same values under a new shape with equal element count.
    pub fn reshaped(&self, shape: Shape) -> Result<Tensor<T>> {
        if shape.len() != self.len() {
            return Err(CfilError::Dimension {
                op: "reshape",
                lhs: self.shape.to_string(),
                rhs: shape.to_string(),
            });
        }
        Tensor::new(shape, self.values.clone())
    }

    pub fn map_to_f64(&self) -> Tensor<f64> {
        Tensor::<f64>::new(
            self.shape.clone(),
            self.values.iter().map(|v| v.as_f64()).collect(),
        )
        .expect("same element count")
    }

    pub fn map_from_f64(src: &Tensor<f64>) -> Tensor<T> {
        Tensor::new(
            src.shape().clone(),
            src.values().iter().map(|&v| T::of_f64(v)).collect(),
        )
        .expect("same element count")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::<f64>::new(Shape::of(&[2, 2]), vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(Shape::of(&[2, 2]), vec![1.0; 4]).is_ok());
    }

    #[test]
    fn reshape_preserves_flat_order() {
        let t = Tensor::<f64>::new(Shape::of(&[2, 3]), (1..=6).map(|v| v as f64).collect()).unwrap();
        let r = t.reshaped(Shape::of(&[3, 2])).unwrap();
        assert_eq!(r.values(), t.values());
        let back = r.reshaped(Shape::of(&[2, 3])).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn seeded_fill_is_reproducible() {
        let mut a = SeededRng::new(9);
        let mut b = SeededRng::new(9);
        let ta = Tensor::<f32>::uniform(Shape::of(&[4, 4]), -1.0, 1.0, &mut a);
        let tb = Tensor::<f32>::uniform(Shape::of(&[4, 4]), -1.0, 1.0, &mut b);
        assert_eq!(ta.values(), tb.values());
    }
}
