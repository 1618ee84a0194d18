use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Gradients, Graph, Result, Tensor, Var};

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// `(name, shape)` inventory.
    pub fn inventory(&self) -> Vec<(String, Vec<usize>)> {
        self.entries.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }
}

/// Parameters of a [`ParamStore`] lifted into a [`Graph`] as leaves,
/// created lazily on first use.
pub struct Bound<'a> {
    graph: &'a Graph,
    store: &'a ParamStore,
    trainable: bool,
    vars: RefCell<BTreeMap<String, Var>>,
}

impl<'a> Bound<'a> {
    pub fn new(graph: &'a Graph, store: &'a ParamStore, trainable: bool) -> Self {
        Self { graph, store, trainable, vars: RefCell::new(BTreeMap::new()) }
    }

    pub fn graph(&self) -> &'a Graph {
        self.graph
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.borrow().get(name) {
            return Ok(*v);
        }
        let t = self.store.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))?;
        let v = self.graph.leaf(t.clone(), self.trainable);
        self.vars.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradient for every stored parameter; zeros where the loss did not reach it.
    pub fn grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let vars = self.vars.borrow();
        self.store
            .iter()
            .map(|(name, t)| {
                let g = vars
                    .get(name)
                    .and_then(|v| grads.get(*v))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Uniform `U(-bound, bound)` initialiser.
pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("shape and length agree")
}
