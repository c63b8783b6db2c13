use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Tensor, Var};

/// Named parameter tensors in a fixed insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Little-endian bytes of every parameter whose name starts with `prefix`.
    pub fn bytes_with_prefix(&self, prefix: &str) -> Vec<u8> {
        let mut out = Vec::new();
        for (n, t) in self.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.extend_from_slice(n.as_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

/// Graph leaves for one pass over a [`ParamStore`].
pub struct Binding {
    vars: HashMap<String, Var>,
    trainable: Vec<(String, Var)>,
    frozen: Vec<(String, Var)>,
}

impl Binding {
    /// Adds every parameter to `g`, as a trainable leaf when `trainable`
    /// says so and as a constant otherwise.
    pub fn new(g: &mut Graph, store: &ParamStore, trainable: &dyn Fn(&str) -> bool) -> Self {
        let mut vars = HashMap::with_capacity(store.len());
        let mut tr = Vec::new();
        let mut fr = Vec::new();
        for (name, t) in store.iter() {
            let v = if trainable(name) {
                let v = g.param(t.clone());
                tr.push((name.to_string(), v));
                v
            } else {
                let v = g.constant(t.clone());
                fr.push((name.to_string(), v));
                v
            };
            vars.insert(name.to_string(), v);
        }
        Self {
            vars,
            trainable: tr,
            frozen: fr,
        }
    }

    /// Uses the caller's leaves for the names in `given` and constants for
    /// everything else. Lets external checkers own the trainable leaves.
    pub fn with_vars(g: &mut Graph, store: &ParamStore, given: &[(String, Var)]) -> Self {
        let mut vars = HashMap::with_capacity(store.len());
        let mut fr = Vec::new();
        for (name, t) in store.iter() {
            let v = match given.iter().find(|(n, _)| n == name) {
                Some((_, v)) => *v,
                None => {
                    let v = g.constant(t.clone());
                    fr.push((name.to_string(), v));
                    v
                }
            };
            vars.insert(name.to_string(), v);
        }
        Self {
            vars,
            trainable: given.to_vec(),
            frozen: fr,
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("missing parameter {name}")))
    }

    pub fn opt(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn trainable(&self) -> &[(String, Var)] {
        &self.trainable
    }

    pub fn frozen(&self) -> &[(String, Var)] {
        &self.frozen
    }

    /// Gradient per trainable parameter; parameters that do not reach the
    /// loss get zeros.
    pub fn collect(&self, grads: &Gradients, store: &ParamStore) -> Vec<(String, Tensor)> {
        self.trainable
            .iter()
            .map(|(n, v)| {
                let t = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(n).unwrap().shape()));
                (n.clone(), t)
            })
            .collect()
    }

    /// Largest gradient norm seen on a frozen parameter.
    pub fn frozen_grad_norm(&self, grads: &Gradients) -> f64 {
        self.frozen
            .iter()
            .filter_map(|(_, v)| grads.get(*v))
            .map(Tensor::norm)
            .fold(0.0, f64::max)
    }
}
