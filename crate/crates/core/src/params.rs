//! Named parameter storage and the forward context that binds parameters
//! into a [`Graph`].

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    /// Running statistics and other buffers are stored but never optimized.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.entries.insert(name.into(), Param { value, trainable });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.trainable)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable_numel(&self) -> usize {
        self.entries.values().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Draws `N(0, std^2)` values from a stream derived from `(seed, name)`, so a
    /// parameter's initial value does not depend on which others exist.
    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64, seed: u64) {
        let mut r = rng::named_rng(seed, name);
        let normal = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(shape, |_| normal.sample(&mut r));
        self.insert(name, t, true);
    }
}

/// Forward-pass context: a fresh tape plus lazily bound parameters.
pub struct Cx<'s> {
    pub g: Graph,
    store: &'s mut ParamStore,
    bound: BTreeMap<String, Var>,
    /// Batch norm uses batch statistics (and updates running ones) when set.
    pub training: bool,
    /// When false, parameters enter the tape as constants.
    pub track_grads: bool,
}

impl<'s> Cx<'s> {
    pub fn new(store: &'s mut ParamStore, training: bool) -> Self {
        Cx { g: Graph::new(), store, bound: BTreeMap::new(), training, track_grads: true }
    }

    pub fn frozen(store: &'s mut ParamStore) -> Self {
        Cx { g: Graph::new(), store, bound: BTreeMap::new(), training: false, track_grads: false }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let trainable = self.store.is_trainable(name);
        let value = self.store.get(name)?.clone();
        let v = self.g.leaf(value, trainable && self.track_grads);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        self.store
    }

    /// Gradients of every bound trainable parameter (zeros when unreached).
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter(|(name, _)| self.store.is_trainable(name))
            .map(|(name, &v)| (name.clone(), self.g.grad_tensor(v)))
            .collect()
    }

    pub fn bound(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.bound.iter()
    }
}
