use indexmap::IndexMap;

use super::tensor::Tensor;
use crate::error::{MoseError, Result};
use crate::scalar::Scalar;

/// Handle to one entry of a [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tables with gradient accumulators, iterated in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet<T> {
    index: IndexMap<String, usize>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            index: IndexMap::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(MoseError::invalid(format!("duplicate parameter {name}")));
        }
        let id = self.values.len();
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.index.insert(name, id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalars across all entries.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.index
            .get_index(id.0)
            .map(|(n, _)| n.as_str())
            .expect("param id from this set")
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.value(id))
    }

    /// Replace a value by name; the shape must match the registered one.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| MoseError::invalid(format!("unknown parameter {name}")))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(MoseError::shape(format!(
                "parameter {name}: expected {:?}, got {:?}",
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// `(name, value, grad)` in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>, &Tensor<T>)> {
        self.index
            .keys()
            .zip(self.values.iter().zip(&self.grads))
            .map(|(n, (v, g))| (n.as_str(), v, g))
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn values(&self) -> ParamValues<'_, T> {
        ParamValues(&self.values)
    }

    /// Borrow values read-only and gradients mutably at the same time.
    pub fn split(&mut self) -> (ParamValues<'_, T>, ParamGrads<'_, T>) {
        (ParamValues(&self.values), ParamGrads(&mut self.grads))
    }

    pub(crate) fn values_and_grads_mut(&mut self) -> (&mut [Tensor<T>], &[Tensor<T>]) {
        (&mut self.values, &self.grads)
    }

    pub fn grads_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.grads
    }
}

/// Read-only view of parameter values used during forward and backward.
#[derive(Clone, Copy)]
pub struct ParamValues<'a, T>(&'a [Tensor<T>]);

impl<'a, T: Scalar> ParamValues<'a, T> {
    pub fn get(&self, id: ParamId) -> &'a [T] {
        self.0[id.0].data()
    }

    pub fn tensor(&self, id: ParamId) -> &'a Tensor<T> {
        &self.0[id.0]
    }
}

/// Mutable gradient accumulators.
pub struct ParamGrads<'a, T>(&'a mut [Tensor<T>]);

impl<T: Scalar> ParamGrads<'_, T> {
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        self.0[id.0].data_mut()
    }

    pub fn accumulate(&mut self, id: ParamId, delta: &[T]) {
        let g = self.0[id.0].data_mut();
        assert_eq!(g.len(), delta.len(), "gradient length");
        for (a, &d) in g.iter_mut().zip(delta) {
            *a += d;
        }
    }
}
