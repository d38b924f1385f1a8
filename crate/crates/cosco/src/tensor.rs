//! Dense f64 tensors and named trainable parameters.
//!
//! A [`Tensor`] is a flat row-major value block with a shape. Parameters carry
//! an always-allocated gradient buffer of the same shape; gradients are
//! accumulated additively by [`crate::tape::Tape::backward`] and cleared with
//! [`zero_grad`].

use crate::error::{Error, Result};

/// Dense multi-dimensional array of f64 values with optional gradient tracking.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor from a shape and row-major data, validating the element count.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in shape {:?}", shape)));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Turn on gradient tracking, allocating a zeroed gradient buffer.
    pub fn tracked(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    /// Replace the gradient buffer; the shape must match.
    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.requires_grad = true;
        self.grad = Some(grad);
    }

    /// Reset the gradient buffer to zeros (allocating it if tracking is on).
    pub fn reset_grad(&mut self) {
        if self.requires_grad {
            match &mut self.grad {
                Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
                None => self.grad = Some(vec![0.0; self.data.len()]),
            }
        }
    }

    /// The value of a single-element tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Rank(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }
}

/// A named trainable tensor. Names are unique within a model and establish
/// the deterministic (lexicographic) parameter order that optimizers rely on.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Parameter {
            name: name.into(),
            value: value.tracked(),
        }
    }

    /// The populated gradient, or a state error if it was never allocated.
    pub fn grad(&self) -> Result<&[f64]> {
        self.value
            .grad()
            .ok_or_else(|| Error::State(format!("parameter {:?} has no gradient", self.name)))
    }
}

/// Anything holding an ordered set of named parameters.
///
/// Implementations must return parameters sorted lexicographically by name,
/// and the order must be identical between `parameters` and `parameters_mut`.
pub trait Parameterized {
    fn parameters(&self) -> Vec<&Parameter>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;

    fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.value.reset_grad();
        }
    }
}

/// Reset the gradients of a parameter list to zeros.
pub fn zero_grad<'a>(params: impl IntoIterator<Item = &'a mut Parameter>) {
    for p in params {
        p.value.reset_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(&[2, 3], vec![1.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn tracked_allocates_zero_grad() {
        let t = Tensor::new(&[2], vec![1.0, 2.0]).unwrap().tracked();
        assert!(t.requires_grad());
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_grad_is_idempotent() {
        let mut p = Parameter::new("w", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        p.value.grad_mut().unwrap().copy_from_slice(&[3.0, 4.0]);
        zero_grad([&mut p]);
        assert_eq!(p.grad().unwrap(), &[0.0, 0.0]);
        zero_grad([&mut p]);
        assert_eq!(p.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn scalar_value_requires_single_element() {
        let t = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(t.scalar_value(), Err(Error::Rank(_))));
        assert_eq!(Tensor::scalar(7.5).scalar_value().unwrap(), 7.5);
    }
}
