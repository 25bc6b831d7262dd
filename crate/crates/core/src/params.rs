use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered, named collection of tensors.
///
/// Used both for trainable parameters and for gradients with respect to them;
/// a gradient set always carries the same names and shapes as its parameters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.entries[i].1
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].1
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    /// Errors unless `other` has the same names and shapes, in order.
    pub fn check_compatible(&self, other: &ParameterSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::ParamMismatch(format!(
                "{} tensors vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.entries.iter().zip(&other.entries) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::ParamMismatch(format!(
                    "{na}{:?} vs {nb}{:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    /// `self += c * other`, elementwise.
    pub fn add_scaled(&mut self, other: &ParameterSet, c: f64) {
        for ((_, a), (_, b)) in self.entries.iter_mut().zip(&other.entries) {
            for (x, y) in a.values_mut().iter_mut().zip(b.values()) {
                *x += c * y;
            }
        }
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            for v in t.values_mut() {
                *v *= c;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    pub fn max_abs_diff(&self, other: &ParameterSet) -> f64 {
        self.tensors()
            .zip(other.tensors())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    /// Registers every tensor as a trainable leaf of `graph`, in order.
    pub fn bind(&self, graph: &mut Graph) -> Vec<NodeId> {
        self.tensors().map(|t| graph.param(t.clone())).collect()
    }

    /// Collects gradients for nodes returned by [`ParameterSet::bind`].
    pub fn gradients(&self, grads: &Gradients, nodes: &[NodeId]) -> ParameterSet {
        Self {
            entries: self
                .entries
                .iter()
                .zip(nodes)
                .map(|((n, _), &id)| (n.clone(), grads.wrt(id)))
                .collect(),
        }
    }

    /// Appends all entries of `other`, prefixing their names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParameterSet) {
        for (n, t) in other.iter() {
            self.push(format!("{prefix}{n}"), t.clone());
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParameterSet {
        let mut out = ParameterSet::new();
        for (n, t) in self.iter() {
            if let Some(rest) = n.strip_prefix(prefix) {
                out.push(rest, t.clone());
            }
        }
        out
    }
}
