use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named parameter table. Ordered by name so that iteration, checkpoint
/// layout and gradient reduction are deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Copies every entry of `other` whose name starts with `prefix`.
    pub fn extend_prefix(&mut self, other: &ParamStore, prefix: &str) {
        for (k, v) in other.iter().filter(|(k, _)| k.starts_with(prefix)) {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    /// Glorot-style normal initialization for a `fan_in × fan_out` matrix.
    pub fn init_matrix(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        self.init_normal(name, &[fan_in, fan_out], std, rng);
    }

    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) {
        let normal = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| round_f32(normal.sample(rng))).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("shape"));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, Tensor::full(shape, value));
    }
}

/// Rounds to the nearest `f32`. Stored parameters and optimizer moments are
/// kept on the `f32` grid so that the 32-bit checkpoint payload is lossless.
pub fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Binds parameters from a store into a graph, as trainable leaves unless
/// their name falls under a frozen prefix (then as constants).
pub struct Binder<'a> {
    store: &'a ParamStore,
    frozen: Vec<String>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            frozen: Vec::new(),
        }
    }

    /// A binder that treats every parameter as a constant.
    pub fn frozen_all(store: &'a ParamStore) -> Self {
        Self {
            store,
            frozen: vec![String::new()],
        }
    }

    pub fn with_frozen(store: &'a ParamStore, prefixes: &[String]) -> Self {
        Self {
            store,
            frozen: prefixes.to_vec(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    pub fn bind(&self, g: &mut Graph, name: &str) -> Result<Var> {
        let t = self.store.get(name)?;
        Ok(if self.is_frozen(name) {
            g.named_constant(name, t)
        } else {
            g.param(name, t)
        })
    }
}
