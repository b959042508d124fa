//! Named parameter storage and per-graph binding.
//!
//! Parameters live in a [`ParamSet`] keyed by name; each training step builds
//! a fresh graph and binds the parameters it touches as leaves through a
//! [`Binding`]. Binding a name twice returns the same [`Var`], which is what
//! ties the peripheral and fixation passes to the same weight storage.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;

use crate::numerics::{Gradients, Graph, Real, Tensor, Var};

#[derive(Clone)]
pub struct ParamEntry<T> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// Ordered (by name) set of named parameter tensors.
#[derive(Clone, Default)]
pub struct ParamSet<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.insert_entry(name, tensor, true);
    }

    pub fn insert_frozen(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.insert_entry(name, tensor, false);
    }

    fn insert_entry(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), ParamEntry { tensor, trainable });
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn insert_randn<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) {
        self.insert(name, Tensor::randn(shape, std, rng));
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn insert_full(&mut self, name: impl Into<String>, shape: &[usize], value: T) {
        self.insert(name, Tensor::full(shape, value));
    }

    /// Identity matrix parameter (used for the fusion projection).
    pub fn insert_eye(&mut self, name: impl Into<String>, n: usize) {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.set(&[i, i], T::one());
        }
        self.insert(name, t);
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .tensor
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .tensor
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).map(|e| e.trainable).unwrap_or(false)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .trainable = trainable;
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }
}

/// Lazily binds parameters from a [`ParamSet`] into one [`Graph`].
pub struct Binding<'a, T: Real> {
    graph: &'a Graph<T>,
    params: &'a ParamSet<T>,
    vars: RefCell<BTreeMap<String, Var>>,
}

impl<'a, T: Real> Binding<'a, T> {
    pub fn new(graph: &'a Graph<T>, params: &'a ParamSet<T>) -> Self {
        Self {
            graph,
            params,
            vars: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn graph(&self) -> &'a Graph<T> {
        self.graph
    }

    /// Routes a name to an existing var instead of the stored tensor. Used by
    /// gradient checks to substitute one parameter with a probe input.
    pub fn set_var(&self, name: &str, var: Var) {
        assert_eq!(
            self.graph.shape(var),
            self.params.get(name).shape(),
            "override shape mismatch for {name}"
        );
        self.vars.borrow_mut().insert(name.to_string(), var);
    }

    /// Var for a named parameter; repeated calls return the identical var.
    pub fn var(&self, name: &str) -> Var {
        if let Some(&v) = self.vars.borrow().get(name) {
            return v;
        }
        let entry = self
            .params
            .entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        let v = if entry.trainable {
            self.graph.param(entry.tensor.clone())
        } else {
            self.graph.constant(entry.tensor.clone())
        };
        self.vars.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Gradient per bound trainable parameter, zeros where none flowed.
    pub fn collect_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        let mut out = BTreeMap::new();
        for (name, &var) in self.vars.borrow().iter() {
            if !self.params.is_trainable(name) {
                continue;
            }
            let g = grads
                .get(var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.params.get(name).shape()));
            out.insert(name.clone(), g);
        }
        out
    }

    pub fn bound_names(&self) -> Vec<String> {
        self.vars.borrow().keys().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binding_memoizes_vars() {
        let mut params = ParamSet::<f64>::new();
        params.insert_zeros("a.w", &[2, 2]);
        let g = Graph::new();
        let b = Binding::new(&g, &params);
        let v1 = b.var("a.w");
        let v2 = b.var("a.w");
        assert_eq!(v1, v2, "same name must bind to the same graph leaf");
    }

    #[test]
    fn frozen_params_bind_as_constants() {
        let mut params = ParamSet::<f64>::new();
        params.insert_full("w", &[1], 2.0);
        params.set_trainable("w", false);
        let g = Graph::new();
        let b = Binding::new(&g, &params);
        let w = b.var("w");
        let loss = g.sum_all(g.mul(w, w));
        let grads = g.backward(loss);
        assert!(grads.get(w).is_none());
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_rejected() {
        let mut params = ParamSet::<f64>::new();
        params.insert_zeros("x", &[1]);
        params.insert_zeros("x", &[1]);
    }
}
