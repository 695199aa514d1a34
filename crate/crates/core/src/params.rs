//! Named parameter and buffer registry.
//!
//! Every trainable parameter owns exactly one gradient accumulator of the
//! same shape. Buffers hold non-trainable state (batchnorm running
//! statistics). Registration order is stable and is the iteration,
//! initialization-draw and checkpoint order.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BufId(pub usize);

pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Whether weight decay applies (conv/linear weights only).
    pub weight_decay: bool,
}

pub struct ParamSet<T: Element> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
    buffers: Vec<(String, Tensor<T>)>,
    buf_by_name: HashMap<String, usize>,
}

impl<T: Element> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            by_name: HashMap::new(),
            buffers: Vec::new(),
            buf_by_name: HashMap::new(),
        }
    }

    pub fn add_param(&mut self, name: &str, value: Tensor<T>, weight_decay: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad,
            weight_decay,
        });
        let id = self.params.len() - 1;
        self.by_name.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<BufId> {
        if self.buf_by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate buffer name {name}")));
        }
        self.buffers.push((name.to_string(), value));
        let id = self.buffers.len() - 1;
        self.buf_by_name.insert(name.to_string(), id);
        Ok(BufId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn buffer(&self, id: BufId) -> &Tensor<T> {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].1
    }

    pub fn buffer_by_name(&self, name: &str) -> Option<BufId> {
        self.buf_by_name.get(name).copied().map(BufId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Add a gradient contribution to a parameter's accumulator.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor<T>) -> Result<()> {
        self.params[id.0].grad.add_in_place(delta)
    }

    /// Split borrow for an in-place update: (value, grad, weight_decay).
    pub fn update_view(&mut self, id: ParamId) -> (&mut Tensor<T>, &Tensor<T>, bool) {
        let p = &mut self.params[id.0];
        (&mut p.value, &p.grad, p.weight_decay)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            for v in p.grad.data_mut() {
                *v = T::zero();
            }
        }
    }

    /// Total trainable scalar count.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_accumulator_matches_shape() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let id = ps.add_param("w", Tensor::zeros(&[2, 3]), true).unwrap();
        assert_eq!(ps.grad(id).shape(), &[2, 3]);
        assert_eq!(ps.num_trainable(), 6);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        ps.add_param("w", Tensor::zeros(&[1]), true).unwrap();
        assert!(ps.add_param("w", Tensor::zeros(&[1]), true).is_err());
    }

    #[test]
    fn accumulate_adds() {
        let mut ps: ParamSet<f64> = ParamSet::new();
        let id = ps.add_param("w", Tensor::zeros(&[2]), true).unwrap();
        let d = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        ps.accumulate_grad(id, &d).unwrap();
        ps.accumulate_grad(id, &d).unwrap();
        assert_eq!(ps.grad(id).data(), &[2.0, 4.0]);
        ps.zero_grads();
        assert_eq!(ps.grad(id).data(), &[0.0, 0.0]);
    }
}
