//! Named trainable parameters.

use crate::error::{Error, Result};
use crate::nncore::rng::CounterRng;
use crate::nncore::tensor::{Scalar, Tensor};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

/// Flat store of named parameters. Iteration follows insertion order, which
/// is deterministic because model construction is.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore<T> {
    params: Vec<Parameter<T>>,
    by_name: BTreeMap<String, usize>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape().to_vec());
        self.by_name.insert(name.clone(), id.0);
        self.params.push(Parameter {
            name,
            value,
            grad,
            trainable: true,
        });
        Ok(id)
    }

    pub fn insert_normal(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        std: f64,
        rng: &mut CounterRng,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n).map(|_| T::from_f64(rng.next_normal() * std)).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
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

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    /// Accumulate `delta` into the gradient. Frozen parameters are skipped,
    /// keeping their gradient identically zero.
    pub fn add_grad(&mut self, id: ParamId, delta: &[T]) {
        let p = &mut self.params[id.0];
        if !p.trainable {
            return;
        }
        debug_assert_eq!(p.grad.len(), delta.len());
        let g = p.grad.data_mut();
        for i in 0..delta.len() {
            g[i] = g[i] + delta[i];
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Freeze or unfreeze every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Named tensors sorted by name (checkpoint order).
    pub fn sorted_named(&self) -> Vec<(&str, &Tensor<T>)> {
        self.by_name
            .iter()
            .map(|(n, &i)| (n.as_str(), &self.params[i].value))
            .collect()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn map_precision<U: Scalar>(&self) -> ParameterStore<U> {
        let mut out = ParameterStore::new();
        for p in &self.params {
            let id = out.insert(p.name.clone(), p.value.map_precision::<U>()).unwrap();
            out.set_trainable(id, p.trainable);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::<f32>::new();
        s.insert("w", Tensor::zeros(vec![2])).unwrap();
        assert!(s.insert("w", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn frozen_grad_stays_zero() {
        let mut s = ParameterStore::<f32>::new();
        let id = s.insert("w", Tensor::zeros(vec![3])).unwrap();
        s.set_trainable(id, false);
        s.add_grad(id, &[1.0, 2.0, 3.0]);
        assert_eq!(s.grad(id).data(), &[0.0, 0.0, 0.0]);
    }
}
