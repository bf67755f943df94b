use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::array::Tensor;
use super::graph::{Graph, Var};
use crate::error::{Error, Result};

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces every value, checking names and shapes against `other`.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        if other.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                self.values.len(),
                other.len()
            )));
        }
        for ((name, value), (want_name, want)) in other.iter().zip(self.names.iter().zip(&self.values)) {
            if name != want_name || value.shape() != want.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} {:?} does not match {want_name} {:?}",
                    value.shape(),
                    want.shape()
                )));
            }
        }
        for (slot, (_, value)) in self.values.iter_mut().zip(other) {
            *slot = value.clone();
        }
        Ok(())
    }
}

/// A graph plus lazy bindings of store parameters to borrowed leaves.
pub struct Session<'p> {
    pub graph: Graph<'p>,
    store: &'p ParamStore,
    vars: Vec<Option<Var>>,
}

impl<'p> Session<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            graph: Graph::new(),
            store,
            vars: vec![None; store.len()],
        }
    }

    /// Leaf for parameter `id`, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = self.graph.leaf_ref(self.store.get(id));
        self.vars[id.0] = Some(v);
        v
    }

    /// Per-parameter gradients after `graph.backward`; zeros for parameters
    /// the loss does not depend on.
    pub fn param_grads(&self) -> Vec<Tensor> {
        self.store
            .ids()
            .map(|id| {
                self.vars[id.0]
                    .and_then(|v| self.graph.grad(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(self.store.get(id).shape().to_vec()))
            })
            .collect()
    }
}

/// Kaiming-uniform weights with bound `sqrt(6 / fan_in)`.
pub fn kaiming_uniform(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

/// Embedding rows drawn from N(0, 1/d).
pub fn embedding_normal(rows: usize, d: usize, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("positive std");
    Tensor::from_fn([rows, d], |_| dist.sample(rng))
}
