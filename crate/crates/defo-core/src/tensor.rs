//! Dense tensors: a shape, a flat value buffer, and an optional gradient
//! slot. These are the persistent objects (weights, banks, datasets);
//! differentiable computation happens on a [`crate::tape::Graph`].

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::normal_vec;
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    values: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor, checking that the shape matches the value count.
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidInput(format!(
                "tensor shape {shape:?} contains a zero dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::InvalidInput(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                numel,
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: vec![T::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            values: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Identity matrix times `scale`, shape `[n, n]`.
    pub fn identity_scaled(n: usize, scale: T) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.values[i * n + i] = scale;
        }
        t
    }

    /// Entries drawn from N(0, std^2); draws happen in f64 so that the
    /// realized values agree across scalar types.
    pub fn normal(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let numel = shape.iter().product();
        let values = normal_vec(rng, numel, std).into_iter().map(lit).collect();
        Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Flat offset of a multi-dimensional index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &d) in idx.iter().zip(&self.shape) {
            debug_assert!(*i < d);
            off = off * d + i;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.values[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let off = self.offset(idx);
        self.values[off] = v;
    }

    /// Replaces the gradient slot. `None` entries of a frozen mask are
    /// always written; masked (frozen) coordinates are forced to zero so
    /// that no gradient ever appears on them.
    pub fn set_grad_masked(&mut self, grad: &[T], frozen: Option<&[bool]>) -> Result<()> {
        if !self.requires_grad {
            return Err(Error::InvalidInput(
                "set_grad_masked on a tensor without requires_grad".into(),
            ));
        }
        if grad.len() != self.values.len() {
            return Err(Error::DimensionMismatch {
                op: "set_grad_masked",
                lhs: self.shape.clone(),
                rhs: vec![grad.len()],
            });
        }
        let mut g = grad.to_vec();
        if let Some(mask) = frozen {
            debug_assert_eq!(mask.len(), g.len());
            for (gi, &fr) in g.iter_mut().zip(mask) {
                if fr {
                    *gi = T::zero();
                }
            }
        }
        self.grad = Some(g);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// True when every value is finite.
    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; errors on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::DimensionMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut worst = 0.0f64;
        for (a, b) in self.values.iter().zip(&other.values) {
            let d = (*a - *b).abs().to_f64().unwrap_or(f64::INFINITY);
            worst = worst.max(d);
        }
        Ok(worst)
    }

    /// Converts values to f64 (used by the on-disk record format).
    pub fn values_f64(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|v| v.to_f64().expect("scalar converts to f64"))
            .collect()
    }

    /// Rebuilds from f64 values (the on-disk record format).
    pub fn from_f64_values(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| lit(v)).collect())
    }
}

/// Lowest-index argmax; ties always resolve to the smaller index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_lengths() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn offset_is_row_major() {
        let t = Tensor::<f64>::new(vec![2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        assert_eq!(t.at(&[0, 0]), 0.0);
        assert_eq!(t.at(&[0, 2]), 2.0);
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert_eq!(t.at(&[1, 2]), 5.0);
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[5.0]), 0);
        assert_eq!(argmax(&[2.0, 2.0, 2.0]), 0);
    }

    #[test]
    fn masked_grad_zeroes_frozen_entries() {
        let mut t = Tensor::<f64>::zeros(vec![4]).with_requires_grad();
        t.set_grad_masked(&[1.0, 2.0, 3.0, 4.0], Some(&[false, true, false, true]))
            .unwrap();
        assert_eq!(t.grad().unwrap(), &[1.0, 0.0, 3.0, 0.0]);
    }

    #[test]
    fn same_seed_same_normal_tensor() {
        let mut r1 = crate::rng::stream(0, "init");
        let mut r2 = crate::rng::stream(0, "init");
        let a = Tensor::<f64>::normal(vec![3, 3], 0.02, &mut r1);
        let b = Tensor::<f64>::normal(vec![3, 3], 0.02, &mut r2);
        assert_eq!(a, b);
    }
}
