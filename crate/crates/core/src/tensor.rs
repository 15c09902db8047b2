//! Dense row-major `f64` tensors.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Dense n-dimensional array of `f64` in row-major order.
///
/// `data.len()` always equals the product of `shape`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor without validation; callers guarantee the invariants.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0.0; numel(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Independent N(0, std²) entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..numel(shape)).map(|_| normal.sample(rng)).collect();
        Self::from_parts(shape.to_vec(), data)
    }

    /// Independent U(lo, hi) entries.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape)).map(|_| rng.random_range(lo..hi)).collect();
        Self::from_parts(shape.to_vec(), data)
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape, shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        let st = strides(&self.shape);
        let off: usize = index.iter().zip(&st).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let st = strides(&self.shape);
        let off: usize = index.iter().zip(&st).map(|(i, s)| i * s).sum();
        self.data[off] = value;
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc + v)
    }

    /// Stacks equally-shaped tensors along a new trailing axis.
    pub fn stack_last(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack_last", "no tensors to stack"))?;
        if let Some(bad) = parts.iter().find(|p| p.shape != first.shape) {
            return Err(Error::shape(
                "stack_last",
                format!("{:?} vs {:?}", first.shape, bad.shape),
            ));
        }
        let k = parts.len();
        let n = first.len();
        let mut data = vec![0.0; n * k];
        for (j, p) in parts.iter().enumerate() {
            for (i, v) in p.data.iter().enumerate() {
                data[i * k + j] = *v;
            }
        }
        let mut shape = first.shape.clone();
        shape.push(k);
        Ok(Tensor::from_parts(shape, data))
    }

    /// Selects index `i` of the trailing axis.
    pub fn select_last(&self, i: usize) -> Result<Tensor> {
        let k = *self.shape.last().expect("tensor has at least one dim");
        if i >= k {
            return Err(Error::Index { index: i, len: k });
        }
        let data = self.data.iter().skip(i).step_by(k).copied().collect();
        let shape = if self.shape.len() == 1 {
            vec![1]
        } else {
            self.shape[..self.shape.len() - 1].to_vec()
        };
        Ok(Tensor::from_parts(shape, data))
    }

    pub(crate) fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths_and_nan() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides(&[2, 3, 4]), vec![12, 4, 1]);
        let t = Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.get(&[1, 2]), 5.0);
    }

    #[test]
    fn stack_then_select_round_trips() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let s = Tensor::stack_last(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.select_last(0).unwrap(), a);
        assert_eq!(s.select_last(1).unwrap(), b);
    }
}
