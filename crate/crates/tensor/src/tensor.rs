//! Dense row-major tensors.
//!
//! A [`Tensor`] is a plain value: extents plus a flat scalar buffer, with an
//! optional same-shape gradient buffer for trainable parameters. Feature maps
//! are stored channels x height x width.

use crate::error::TensorError;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Tensor<S> {
    dims: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
}

/// Equality ignores the gradient buffer; two tensors are equal when their
/// extents and values agree bit for bit.
impl<S: Scalar> PartialEq for Tensor<S> {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.data == other.data
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(dims: Vec<usize>, data: Vec<S>) -> Result<Self, TensorError> {
        let expected: usize = dims.iter().product();
        if dims.iter().any(|&d| d == 0) || expected != data.len() {
            return Err(TensorError::DataLength {
                dims,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            dims,
            data,
            grad: None,
        })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims,
            data: vec![S::ZERO; n],
            grad: None,
        }
    }

    pub fn filled(dims: Vec<usize>, value: S) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims,
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(usize) -> S) -> Self {
        let n: usize = dims.iter().product();
        Tensor {
            dims,
            data: (0..n).map(&mut f).collect(),
            grad: None,
        }
    }

    /// Attach a zeroed gradient buffer, marking this tensor as trainable.
    pub fn with_grad(mut self) -> Self {
        self.grad = Some(vec![S::ZERO; self.data.len()]);
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [S]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(S::ZERO);
        }
    }

    /// Channel count of a CHW feature map.
    pub fn channels(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[self.dims.len() - 2]
    }

    pub fn width(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossy cast between scalar types via f64.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
            grad: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_data_length() {
        let err = Tensor::new(vec![2, 3], vec![0.0f64; 5]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { expected: 6, .. }));
    }

    #[test]
    fn grad_buffer_present_iff_requested() {
        let t = Tensor::<f64>::zeros(vec![2, 2]);
        assert!(!t.requires_grad());
        let t = t.with_grad();
        assert!(t.requires_grad());
        assert_eq!(t.grad().unwrap().len(), 4);
    }

    #[test]
    fn equality_ignores_grad() {
        let a = Tensor::new(vec![2], vec![1.0f64, 2.0]).unwrap();
        let b = a.clone().with_grad();
        assert_eq!(a, b);
    }
}
