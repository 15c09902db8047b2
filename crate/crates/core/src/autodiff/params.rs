use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named trainable tensor and its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered collection of uniquely named parameters.
///
/// Insertion order is the canonical order for checkpoints and optimizer
/// updates.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, value, grad });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, idx: usize) -> &Parameter {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter {
        &mut self.params[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index_of(name).map(move |i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, idx: usize, g: &Tensor) {
        let p = &mut self.params[idx];
        for (x, v) in p.grad.data_mut().iter_mut().zip(g.data()) {
            *x += v;
        }
    }

    /// Zeroes every parameter whose name satisfies `pred`.
    pub fn zero_where(&mut self, mut pred: impl FnMut(&str) -> bool) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if pred(&p.name) {
                p.value.data_mut().fill(0.0);
                n += 1;
            }
        }
        n
    }
}
