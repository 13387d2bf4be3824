//! Dense row-major tensors backing all model parameters and activations.

use crate::error::{Error, Result};
use crate::numerics::rng::RngState;

/// Dense n-dimensional array of f64 values, row-major.
///
/// `grad` is populated for parameter tensors by a backward pass; it always
/// matches `data` in length when present.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Normal(0, std^2) initialization; marks the tensor as a parameter.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut RngState) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.normal() * std).collect();
        Tensor {
            shape,
            data,
            requires_grad: true,
            grad: None,
        }
    }

    /// Zero-initialized parameter tensor.
    pub fn param_zeros(shape: Vec<usize>) -> Self {
        let mut t = Tensor::zeros(shape);
        t.requires_grad = true;
        t
    }

    /// One-initialized parameter tensor (layer norm gains).
    pub fn param_ones(shape: Vec<usize>) -> Self {
        let mut t = Tensor::full(shape, 1.0);
        t.requires_grad = true;
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The two extents of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::ShapeMismatch {
                op: "dims2",
                lhs: self.shape.clone(),
                rhs: vec![0, 0],
            }),
        }
    }

    /// Round every element through f32, the checkpoint storage precision.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    /// Accumulate `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (gi, &v) in grad.iter_mut().zip(g) {
            *gi += v;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains('5'), "{msg}");
    }

    #[test]
    fn shape_product_equals_len() {
        let t = Tensor::zeros(vec![3, 4, 2]);
        assert_eq!(t.shape().iter().product::<usize>(), t.len());
    }

    #[test]
    fn grad_accumulates_with_matching_shape() {
        let mut t = Tensor::zeros(vec![2, 2]);
        t.accumulate_grad(&[1.0, 2.0, 3.0, 4.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(t.grad.as_deref().unwrap(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn quantize_f32_is_idempotent() {
        let mut rng = RngState::new(0);
        let mut t = Tensor::randn(vec![64], 1.0, &mut rng);
        t.quantize_f32();
        let once = t.data().to_vec();
        t.quantize_f32();
        assert_eq!(once, t.data());
    }
}
