use std::collections::BTreeMap;

use super::{Tensor, Var};
use crate::error::{Error, Result};

/// Named learnable parameters plus non-learnable buffers (running statistics).
///
/// Keys are dotted paths such as `encoder.stage1.layer0.linear.weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor) {
        self.buffers.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn set_buffer(&mut self, name: &str, t: Tensor) -> Result<()> {
        match self.buffers.get_mut(name) {
            Some(slot) if slot.shape() == t.shape() => {
                *slot = t;
                Ok(())
            }
            Some(slot) => Err(Error::shape("set_buffer", slot.shape(), t.shape())),
            None => Err(Error::MissingParameter(name.to_string())),
        }
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Parameters and buffers whose path starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            buffers: self
                .buffers
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    leaves: BTreeMap<usize, Tensor>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    pub(crate) fn new(leaves: BTreeMap<usize, Tensor>, params: BTreeMap<String, Var>) -> Self {
        Self { leaves, params }
    }

    /// Gradient of a leaf, `None` when it does not require gradients or is unreached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|v| self.wrt(*v))
    }

    /// Gradients of every named parameter that received one.
    pub fn by_param(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(k, v)| self.wrt(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}
