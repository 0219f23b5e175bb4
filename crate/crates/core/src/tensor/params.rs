use std::collections::BTreeMap;
use std::sync::Arc;

use super::tape::Var;
use super::Tensor;
use crate::error::{Error, Result};

/// Named model parameters, ordered by name for deterministic iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Arc<Tensor>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), Arc::new(t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|t| t.as_ref())
    }

    pub(crate) fn get_shared(&self, name: &str) -> Option<Arc<Tensor>> {
        self.params.get(name).cloned()
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params
            .remove(name)
            .map(|t| Arc::try_unwrap(t).unwrap_or_else(|shared| (*shared).clone()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Sub-store of all parameters whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Replace parameters from `other`, all-or-nothing. Every incoming name
    /// must exist here with an identical shape. Returns the replaced names.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<Vec<String>> {
        let mut problems = Vec::new();
        for (name, t) in other.iter() {
            match self.get(name) {
                None => problems.push(format!("`{name}` not present in target")),
                Some(cur) if cur.shape() != t.shape() => problems.push(format!(
                    "`{name}` shape {:?} vs target {:?}",
                    t.shape(),
                    cur.shape()
                )),
                Some(_) => {}
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(problems.join("; ")));
        }
        let mut loaded = Vec::with_capacity(other.len());
        for (name, t) in other.params.iter() {
            self.params.insert(name.clone(), t.clone());
            loaded.push(name.clone());
        }
        Ok(loaded)
    }
}

/// Result of a backward sweep: gradients of every gradient-requiring leaf.
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub(crate) fn new(leaves: Vec<Option<Tensor>>, params: Vec<(String, Var)>) -> Self {
        Gradients { leaves, params }
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(v.index()).and_then(Option::as_ref)
    }

    /// Gradients of all parameters bound on the tape, keyed by name.
    pub fn param_grads(mut self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, v) in std::mem::take(&mut self.params) {
            if let Some(g) = self.leaves[v.index()].take() {
                out.insert(name, g);
            }
        }
        out
    }
}
